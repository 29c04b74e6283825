#include "cmco/checkpoint.hpp"

#include "cmco/error.hpp"

namespace cmco {

namespace fs = std::filesystem;
using io::json;

json to_json(const BranchConfig& cfg) {
  return {{"kind", nn::to_string(cfg.kind)},
          {"input_channels", cfg.input_channels},
          {"hidden", cfg.hidden},
          {"layers", cfg.layers},
          {"dropout", cfg.dropout},
          {"layer_norm", cfg.layer_norm}};
}

json to_json(const TrunkConfig& cfg) {
  return {{"widths", cfg.widths},
          {"activation", nn::to_string(cfg.activation)},
          {"dropout", cfg.dropout}};
}

json to_json(const NormStats& s) {
  return {{"input_mean", s.input_mean}, {"input_std", s.input_std},
          {"output_mean", s.output_mean}, {"output_std", s.output_std},
          {"coord_min", s.coord_min},   {"coord_max", s.coord_max}};
}

BranchConfig branch_config_from_json(const json& j) {
  BranchConfig cfg;
  try {
    cfg.kind = nn::parse_cell_kind(j.value("kind", nn::to_string(cfg.kind)));
    cfg.input_channels = j.value("input_channels", cfg.input_channels);
    cfg.hidden = j.value("hidden", cfg.hidden);
    cfg.layers = j.value("layers", cfg.layers);
    cfg.dropout = j.value("dropout", cfg.dropout);
    cfg.layer_norm = j.value("layer_norm", cfg.layer_norm);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("branch config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

TrunkConfig trunk_config_from_json(const json& j) {
  TrunkConfig cfg;
  try {
    cfg.widths = j.value("widths", cfg.widths);
    cfg.activation = nn::parse_activation(j.value("activation", nn::to_string(cfg.activation)));
    cfg.dropout = j.value("dropout", cfg.dropout);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("trunk config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

NormStats norm_stats_from_json(const json& j) {
  NormStats s;
  try {
    s.input_mean = j.at("input_mean").get<std::vector<double>>();
    s.input_std = j.at("input_std").get<std::vector<double>>();
    s.output_mean = j.at("output_mean").get<double>();
    s.output_std = j.at("output_std").get<double>();
    s.coord_min = j.at("coord_min").get<std::vector<double>>();
    s.coord_max = j.at("coord_max").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("normalization stats: ") + e.what());
  }
  return s;
}

void save_checkpoint(const fs::path& dir, const DeepONetModel& model) {
  io::ensure_directory(dir);
  std::vector<double> flat;
  flat.reserve(parameter_count(model));
  json params = json::array();
  for (const auto& [name, m] : model.params.named()) {
    params.push_back({{"name", name}, {"shape", {m->rows(), m->cols()}}});
    flat.insert(flat.end(), m->values().begin(), m->values().end());
  }
  json manifest = {{"format", "cmco-checkpoint"},
                   {"format_version", kCheckpointFormatVersion},
                   {"dtype", "float32"},
                   {"endianness", "little"},
                   {"branch", to_json(model.branch)},
                   {"trunk", to_json(model.trunk)},
                   {"norm", to_json(model.norm)},
                   {"parameter_count", flat.size()},
                   {"parameters", params},
                   {"data_file", "params.bin"}};
  io::write_f32(dir / "params.bin", flat);
  io::write_json(dir / "manifest.json", manifest);
}

DeepONetModel load_checkpoint(const fs::path& dir) {
  const json manifest = io::read_json(dir / "manifest.json");
  io::check_format(manifest, "cmco-checkpoint", kCheckpointFormatVersion, dir / "manifest.json");

  nn::RngStream unused(0, 0);
  DeepONetModel model = build_model(branch_config_from_json(manifest.at("branch")),
                                    trunk_config_from_json(manifest.at("trunk")), unused);
  model.norm = norm_stats_from_json(manifest.at("norm"));
  model.norm.validate(model.branch.input_channels, model.trunk.query_dim());

  auto refs = model.params.refs();
  const json& listed = manifest.at("parameters");
  if (listed.size() != refs.size()) {
    throw ConfigError("checkpoint lists " + std::to_string(listed.size()) +
                      " parameter arrays, configs imply " + std::to_string(refs.size()));
  }
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const auto shape = listed[k].at("shape").get<std::vector<std::size_t>>();
    if (listed[k].at("name").get<std::string>() != refs[k].name || shape.size() != 2 ||
        shape[0] != refs[k].value->rows() || shape[1] != refs[k].value->cols()) {
      throw ConfigError("checkpoint parameter " + std::to_string(k) + " (" +
                        listed[k].dump() + ") does not match " + refs[k].name + " " +
                        refs[k].value->shape_string());
    }
  }
  const std::vector<double> flat = io::read_f32(dir / "params.bin", parameter_count(model));
  std::size_t offset = 0;
  for (auto& r : refs) {
    for (double& v : r.value->values()) v = flat[offset++];
  }
  return model;
}

DeepONetModel round_trip_f32(DeepONetModel model) {
  for (auto& r : model.params.refs())
    for (double& v : r.value->values()) v = io::to_f32(v);
  return model;
}

}  // namespace cmco
