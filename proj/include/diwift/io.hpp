#pragma once

#include "diwift/basenet.hpp"
#include "diwift/common.hpp"
#include "diwift/selector.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <string>
#include <vector>

namespace diwift {

// Model files are JSON documents. Doubles are written in shortest round-trip
// form, so a reloaded model reproduces forward outputs bit for bit.

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": invalid JSON: " + e.what());
  }
}

inline void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw DataError("write failed: " + path);
}

namespace detail {

inline std::vector<double> to_vector(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline Vector from_vector(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline void expect_format(const nlohmann::json& j, const std::string& format) {
  if (!j.is_object() || j.value("format", "") != format) throw DataError("not a " + format + " document");
}

}  // namespace detail

inline nlohmann::json basenet_to_json(const BaseNet& net) {
  return {{"format", "diwift-basenet"}, {"widths", net.widths()}, {"theta", detail::to_vector(net.flat())}};
}

inline BaseNet basenet_from_json(const nlohmann::json& j) {
  detail::expect_format(j, "diwift-basenet");
  try {
    BaseNet net(j.at("widths").get<std::vector<std::size_t>>());
    const auto theta = j.at("theta").get<std::vector<double>>();
    if (theta.size() != net.param_count())
      throw DataError("base network has " + std::to_string(theta.size()) + " parameters, expected " +
                      std::to_string(net.param_count()));
    net.flat() = detail::from_vector(theta);
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed base network: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("malformed base network: ") + e.what());
  }
}

inline nlohmann::json selector_config_json(const SelectorConfig& c) {
  return {{"embed_dim", c.embed_dim},
          {"heads", c.heads},
          {"gate_hidden", c.gate_hidden},
          {"gate_bias_init", c.gate_bias_init},
          {"tau_min", c.schedule.tau_min},
          {"t_max", c.schedule.t_max},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"plateau_tolerance", c.plateau_tolerance},
          {"patience", c.patience}};
}

inline nlohmann::json selector_to_json(const Selector& sel) {
  return {{"format", "diwift-selector"},
          {"input_dim", sel.input_dim()},
          {"config", selector_config_json(sel.config())},
          {"omega", detail::to_vector(sel.flat())}};
}

inline Selector selector_from_json(const nlohmann::json& j) {
  detail::expect_format(j, "diwift-selector");
  try {
    const auto& c = j.at("config");
    SelectorConfig cfg;
    cfg.embed_dim = c.at("embed_dim").get<std::size_t>();
    cfg.heads = c.at("heads").get<std::size_t>();
    cfg.gate_hidden = c.at("gate_hidden").get<std::size_t>();
    cfg.gate_bias_init = c.at("gate_bias_init").get<double>();
    cfg.schedule.tau_min = c.at("tau_min").get<double>();
    cfg.schedule.t_max = c.at("t_max").get<std::size_t>();
    cfg.learning_rate = c.at("learning_rate").get<double>();
    cfg.batch_size = c.at("batch_size").get<std::size_t>();
    cfg.plateau_tolerance = c.at("plateau_tolerance").get<double>();
    cfg.patience = c.at("patience").get<std::size_t>();
    Selector sel(j.at("input_dim").get<std::size_t>(), cfg);
    const auto omega = j.at("omega").get<std::vector<double>>();
    if (omega.size() != sel.param_count())
      throw DataError("selector has " + std::to_string(omega.size()) + " parameters, expected " +
                      std::to_string(sel.param_count()));
    sel.flat() = detail::from_vector(omega);
    return sel;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed selector: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("malformed selector: ") + e.what());
  }
}

inline void save_basenet(const BaseNet& net, const std::string& path) { write_json(basenet_to_json(net), path); }
inline BaseNet load_basenet(const std::string& path) { return basenet_from_json(read_json(path)); }
inline void save_selector(const Selector& sel, const std::string& path) { write_json(selector_to_json(sel), path); }
inline Selector load_selector(const std::string& path) { return selector_from_json(read_json(path)); }

/// n rows of d comma-separated 0/1 entries under a header of feature names.
inline void write_mask_csv(const MaskMatrix& s, const std::vector<std::string>& names, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (std::size_t k = 0; k < names.size(); ++k) out << (k ? "," : "") << names[k];
  out << '\n';
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    for (Eigen::Index k = 0; k < s.cols(); ++k) out << (k ? "," : "") << int(s(i, k));
    out << '\n';
  }
  if (!out) throw DataError("write failed: " + path);
}

}  // namespace diwift
