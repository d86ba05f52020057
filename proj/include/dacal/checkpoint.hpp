#pragma once

#include <fstream>

#include <json.hpp>

#include "dacal/critic.hpp"
#include "dacal/cyclic_objective.hpp"
#include "dacal/enhancer.hpp"

// Versioned binary checkpoint: magic + version + JSON manifest (block names,
// shapes, byte offsets, specs, penalty states) + raw little-endian doubles.
// Writes go through a temp file and rename, loads validate shapes.

namespace dacal {

struct CheckpointVersionError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct CheckpointCorruptError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct CheckpointShapeError : CheckpointError {
  using CheckpointError::CheckpointError;
};

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'D', 'A', 'C', 'A', 'L', 'C', 'K', 'P'};

struct EnhancerCheckpoint {
  uint32_t version = kCheckpointVersion;
  int64_t iteration = 0;
  int stage = 1;
  std::string mode = "supervised";
  EnhancerSpec enhancer_spec;
  CriticSpec critic_spec;
  ObjectiveWeights weights;
  PenaltyState penalty_fwd, penalty_bwd;
  std::map<std::string, Tensor> blocks;  // "E.netG1.enc1.w", "C.netS1", ...

  bool has_prefix(const std::string& p) const {
    auto it = blocks.lower_bound(p);
    return it != blocks.end() && it->first.rfind(p, 0) == 0;
  }
};

namespace detail {

inline nlohmann::json spec_to_json(const EnhancerSpec& s) {
  return {{"depth", s.depth},
          {"base_channels", s.base_channels},
          {"beta", s.beta},
          {"scale_level", s.scale_level == ScaleLevel::kHigh ? "high" : "low"},
          {"temporal", s.temporal}};
}

inline EnhancerSpec spec_from_json(const nlohmann::json& j) {
  EnhancerSpec s;
  s.depth = j.at("depth").get<int64_t>();
  s.base_channels = j.at("base_channels").get<int64_t>();
  s.beta = j.at("beta").get<double>();
  s.scale_level = j.at("scale_level").get<std::string>() == "high" ? ScaleLevel::kHigh
                                                                   : ScaleLevel::kLow;
  s.temporal = j.at("temporal").get<bool>();
  return s;
}

inline nlohmann::json critic_spec_to_json(const CriticSpec& s) {
  return {{"depth", s.depth},
          {"base_channels", s.base_channels},
          {"feature_dim", s.feature_dim},
          {"slices", s.slices},
          {"window", s.window},
          {"scale_level", s.scale_level == ScaleLevel::kHigh ? "high" : "low"},
          {"blur_sigma", s.blur.sigma},
          {"blur_radius", s.blur.radius}};
}

inline CriticSpec critic_spec_from_json(const nlohmann::json& j) {
  CriticSpec s;
  s.depth = j.at("depth").get<int64_t>();
  s.base_channels = j.at("base_channels").get<int64_t>();
  s.feature_dim = j.at("feature_dim").get<int64_t>();
  s.slices = j.at("slices").get<int64_t>();
  s.window = j.at("window").get<int64_t>();
  s.scale_level = j.at("scale_level").get<std::string>() == "high" ? ScaleLevel::kHigh
                                                                   : ScaleLevel::kLow;
  s.blur.sigma = j.at("blur_sigma").get<double>();
  s.blur.radius = j.at("blur_radius").get<int64_t>();
  return s;
}

inline nlohmann::json penalty_to_json(const PenaltyState& p) {
  return {{"lambda", p.lambda}, {"avg", p.avg},           {"eta", p.eta},
          {"tau", p.tau},       {"lambda_min", p.lambda_min}, {"lambda_max", p.lambda_max}};
}

inline PenaltyState penalty_from_json(const nlohmann::json& j) {
  PenaltyState p;
  p.lambda = j.at("lambda").get<double>();
  p.avg = j.at("avg").get<double>();
  p.eta = j.at("eta").get<double>();
  p.tau = j.at("tau").get<double>();
  p.lambda_min = j.at("lambda_min").get<double>();
  p.lambda_max = j.at("lambda_max").get<double>();
  return p;
}

}  // namespace detail

inline void save_checkpoint(const EnhancerCheckpoint& ckpt, const std::string& path) {
  nlohmann::json manifest;
  manifest["version"] = ckpt.version;
  manifest["iteration"] = ckpt.iteration;
  manifest["stage"] = ckpt.stage;
  manifest["mode"] = ckpt.mode;
  manifest["enhancer_spec"] = detail::spec_to_json(ckpt.enhancer_spec);
  manifest["critic_spec"] = detail::critic_spec_to_json(ckpt.critic_spec);
  manifest["weights"] = {{"gamma1", ckpt.weights.gamma1}, {"gamma2", ckpt.weights.gamma2}};
  manifest["penalty_fwd"] = detail::penalty_to_json(ckpt.penalty_fwd);
  manifest["penalty_bwd"] = detail::penalty_to_json(ckpt.penalty_bwd);
  nlohmann::json blocks = nlohmann::json::array();
  int64_t offset = 0;
  for (const auto& [name, t] : ckpt.blocks) {
    blocks.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset},
                      {"count", t.numel()}});
    offset += t.numel();
  }
  manifest["blocks"] = std::move(blocks);
  std::string mtext = manifest.dump();

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + tmp);
    f.write(kCheckpointMagic, 8);
    uint32_t ver = ckpt.version;
    f.write(reinterpret_cast<const char*>(&ver), sizeof ver);
    uint64_t mlen = mtext.size();
    f.write(reinterpret_cast<const char*>(&mlen), sizeof mlen);
    f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    for (const auto& [name, t] : ckpt.blocks)
      f.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!f) throw CheckpointError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline EnhancerCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path);
  char magic[8];
  if (!f.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointCorruptError("bad magic in " + path);
  uint32_t version = 0;
  if (!f.read(reinterpret_cast<char*>(&version), sizeof version))
    throw CheckpointCorruptError("truncated header in " + path);
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(version));
  uint64_t mlen = 0;
  if (!f.read(reinterpret_cast<char*>(&mlen), sizeof mlen) || mlen > (1ull << 30))
    throw CheckpointCorruptError("truncated manifest length in " + path);
  std::string mtext(mlen, '\0');
  if (!f.read(mtext.data(), static_cast<std::streamsize>(mlen)))
    throw CheckpointCorruptError("truncated manifest in " + path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mtext);
  } catch (const nlohmann::json::exception&) {
    throw CheckpointCorruptError("unparseable manifest in " + path);
  }
  EnhancerCheckpoint ckpt;
  try {
    ckpt.version = manifest.at("version").get<uint32_t>();
    ckpt.iteration = manifest.at("iteration").get<int64_t>();
    ckpt.stage = manifest.at("stage").get<int>();
    ckpt.mode = manifest.at("mode").get<std::string>();
    ckpt.enhancer_spec = detail::spec_from_json(manifest.at("enhancer_spec"));
    ckpt.critic_spec = detail::critic_spec_from_json(manifest.at("critic_spec"));
    ckpt.weights.gamma1 = manifest.at("weights").at("gamma1").get<double>();
    ckpt.weights.gamma2 = manifest.at("weights").at("gamma2").get<double>();
    ckpt.penalty_fwd = detail::penalty_from_json(manifest.at("penalty_fwd"));
    ckpt.penalty_bwd = detail::penalty_from_json(manifest.at("penalty_bwd"));
    for (const auto& b : manifest.at("blocks")) {
      Shape shape = b.at("shape").get<Shape>();
      int64_t count = b.at("count").get<int64_t>();
      if (shape_numel(shape) != count)
        throw CheckpointShapeError("manifest shape/count mismatch for " +
                                   b.at("name").get<std::string>());
      Tensor t(shape);
      if (!f.read(reinterpret_cast<char*>(t.data()),
                  static_cast<std::streamsize>(count * sizeof(double))))
        throw CheckpointCorruptError("truncated block data in " + path);
      ckpt.blocks[b.at("name").get<std::string>()] = std::move(t);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointCorruptError(std::string("manifest field error: ") + e.what());
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Binding networks to checkpoints
// ---------------------------------------------------------------------------

inline void store_params(EnhancerCheckpoint& ckpt, const std::string& prefix,
                         const ParamStore& ps) {
  for (const auto& [name, var] : ps.items()) ckpt.blocks[prefix + "." + name] = var->value;
}

/// Copies matching blocks into a ParamStore, validating shapes.
inline void restore_params(const EnhancerCheckpoint& ckpt, const std::string& prefix,
                           ParamStore& ps) {
  for (const auto& [name, var] : ps.items()) {
    auto it = ckpt.blocks.find(prefix + "." + name);
    if (it == ckpt.blocks.end())
      throw CheckpointShapeError("checkpoint missing block " + prefix + "." + name);
    if (it->second.shape() != var->value.shape())
      throw CheckpointShapeError("block shape mismatch for " + prefix + "." + name + ": " +
                                 shape_str(it->second.shape()) + " vs " +
                                 shape_str(var->value.shape()));
    var->value = it->second;
  }
}

}  // namespace dacal
