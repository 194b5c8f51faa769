// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

#include "prefres/tinynn.hpp"

#include <fstream>

namespace prefres::nn {

namespace {
constexpr int kCheckpointVersion = 1;
}

std::string to_string(Head head) {
  switch (head) {
    case Head::kIdentity:
      return "identity";
    case Head::kTanh:
      return "tanh";
    case Head::kSquashGaussian:
      return "squash-gaussian";
  }
  return "identity";
}

Head head_from_string(const std::string& name) {
  if (name == "identity") return Head::kIdentity;
  if (name == "tanh") return Head::kTanh;
  if (name == "squash-gaussian") return Head::kSquashGaussian;
  throw Error("unknown head tag '" + name + "'");
}

nlohmann::json to_json(const MlpD& net) {
  nlohmann::json doc;
  doc["version"] = kCheckpointVersion;
  doc["widths"] = net.widths();
  doc["head"] = to_string(net.head());
  // nlohmann prints the shortest representation that parses back to the same
  // double, so numbers round-trip exactly.
  doc["params"] = std::vector<double>(net.params().data(), net.params().data() + net.num_params());
  return doc;
}

MlpD mlp_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("version").get<int>() != kCheckpointVersion) {
      throw Error("checkpoint: unsupported version");
    }
    MlpD net(doc.at("widths").get<std::vector<int>>(),
             head_from_string(doc.at("head").get<std::string>()));
    const auto& params = doc.at("params");
    if (static_cast<Eigen::Index>(params.size()) != net.num_params()) {
      throw Error("checkpoint: expected " + std::to_string(net.num_params()) +
                  " parameters, found " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i];
      net.params()[static_cast<Eigen::Index>(i)] =
          p.is_string() ? std::stod(p.get<std::string>()) : p.get<double>();
    }
    if (!net.all_finite()) {
      throw Error("checkpoint: non-finite parameter");
    }
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("checkpoint: malformed document: ") + e.what());
  }
}

void save_checkpoint(const MlpD& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw Error("checkpoint: cannot write " + path);
  }
  out << to_json(net).dump() << '\n';
}

MlpD load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("checkpoint: cannot read " + path);
  }
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint: " + path + " is not valid JSON: " + e.what());
  }
  return mlp_from_json(doc);
}

}  // namespace prefres::nn
