#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "bsdehedge/bsde_solvers.hpp"
#include "bsdehedge/common.hpp"
#include "bsdehedge/config_json.hpp"
#include "bsdehedge/neural_regression.hpp"

namespace bsdehedge {

// Artifact directory layout:
//   manifest.json                scheme, grid, portfolio + hash, seed,
//                                training config, per-step losses, timing
//   net_y_<n>.bin                value network for step n
//   net_z_<n>.bin                gradient network for step n
//   net_gamma_<n>.bin            second-order network (one-step scheme only)

namespace detail {

inline std::string net_file(const std::string& role, int n) {
  return "net_" + role + "_" + format_int(n) + ".bin";
}

inline void save_net(const std::filesystem::path& dir, const std::string& role,
                     int n, const ParamSet& params, std::uint32_t role_id) {
  const auto path = dir / net_file(role, n);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("artifact: cannot write " + path.string());
  save_params(os, params, role_id, n);
  if (!os) throw ConfigError("artifact: short write on " + path.string());
}

inline ParamSet load_net(const std::filesystem::path& dir,
                         const std::string& role, int n,
                         std::uint32_t role_id) {
  const auto path = dir / net_file(role, n);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("artifact: missing " + path.string());
  std::uint64_t stored_role = 0;
  std::uint64_t stored_step = 0;
  ParamSet params = load_params(is, &stored_role, &stored_step);
  if (stored_role != role_id || stored_step != std::uint64_t(n))
    throw ConfigError("artifact: role/step tag mismatch in " + path.string());
  return params;
}

}  // namespace detail

namespace detail {

inline std::string hash_hex_string(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

// Deterministic part of the manifest: everything that is reproducible
// from (portfolio, grid, training config, seed).  Wall time is excluded
// so reruns with the same seed fingerprint identically.
inline json manifest_core(const SolverArtifact& artifact) {
  json core;
  core["schema_version"] = kSchemaVersion;
  core["scheme"] = scheme_name(artifact.scheme);
  core["theta_y"] = artifact.theta_y;
  core["grid"] = grid_to_json(artifact.grid);
  core["seed"] = artifact.seed;
  core["portfolio"] = portfolio_to_json(artifact.portfolio);
  core["portfolio_hash"] = hash_hex_string(portfolio_hash(artifact.portfolio));
  core["train"] = train_to_json(artifact.config);
  core["final_loss_z"] = artifact.final_loss_z;
  core["final_loss_y"] = artifact.final_loss_y;
  return core;
}

}  // namespace detail

inline std::string manifest_hash(const SolverArtifact& artifact) {
  return detail::hash_hex_string(
      fnv1a(canonical_dump(detail::manifest_core(artifact))));
}

inline void save_artifact(const SolverArtifact& artifact,
                          const std::string& directory) {
  namespace fs = std::filesystem;
  const fs::path dir(directory);
  fs::create_directories(dir);
  json manifest = detail::manifest_core(artifact);
  manifest["manifest_hash"] = manifest_hash(artifact);
  manifest["wall_time_sec"] = artifact.wall_time_sec;
  {
    std::ofstream os(dir / "manifest.json");
    if (!os)
      throw ConfigError("artifact: cannot write manifest in " + directory);
    os << manifest.dump(2) << '\n';
  }
  const bool with_gamma = artifact.scheme == SchemeKind::OSM;
  for (int n = 0; n < artifact.grid.steps; ++n) {
    detail::save_net(dir, "y", n, artifact.nets[n].y, role_tag::kY);
    detail::save_net(dir, "z", n, artifact.nets[n].z, role_tag::kZ);
    if (with_gamma)
      detail::save_net(dir, "gamma", n, artifact.nets[n].gamma,
                       role_tag::kGamma);
  }
}

inline SolverArtifact load_artifact(const std::string& directory) {
  namespace fs = std::filesystem;
  const fs::path dir(directory);
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream is(manifest_path);
  if (!is)
    throw ConfigError("artifact: missing manifest.json in " + directory);
  json manifest;
  try {
    is >> manifest;
  } catch (const json::exception& e) {
    throw ConfigError("artifact: corrupt manifest in " + directory + ": " +
                      e.what());
  }
  const int version =
      detail::get_or<int>(manifest, "schema_version", kSchemaVersion);
  if (version != kSchemaVersion)
    throw ConfigError("artifact: unsupported schema_version");
  SolverArtifact artifact;
  artifact.scheme = scheme_from_name(
      detail::require<std::string>(manifest, "scheme"));
  artifact.theta_y = detail::require<double>(manifest, "theta_y");
  artifact.grid = grid_from_json(manifest.at("grid"));
  artifact.seed = detail::require<std::uint64_t>(manifest, "seed");
  artifact.portfolio = portfolio_from_json(manifest.at("portfolio"));
  validate_portfolio(artifact.portfolio, artifact.grid);
  const auto stored_hash =
      detail::get_or<std::string>(manifest, "portfolio_hash", "");
  if (!stored_hash.empty()) {
    char hash_hex[17];
    std::snprintf(hash_hex, sizeof hash_hex, "%016llx",
                  static_cast<unsigned long long>(
                      portfolio_hash(artifact.portfolio)));
    if (stored_hash != hash_hex)
      throw ConfigError("artifact: portfolio hash mismatch in " + directory);
  }
  if (manifest.contains("manifest_hash")) {
    json core = manifest;
    core.erase("manifest_hash");
    core.erase("wall_time_sec");
    if (detail::hash_hex_string(fnv1a(canonical_dump(core))) !=
        manifest.at("manifest_hash").get<std::string>())
      throw ConfigError("artifact: manifest hash mismatch in " + directory);
  }
  if (manifest.contains("train"))
    artifact.config = train_from_json(manifest.at("train"));
  artifact.final_loss_z =
      detail::get_or<std::vector<double>>(manifest, "final_loss_z", {});
  artifact.final_loss_y =
      detail::get_or<std::vector<double>>(manifest, "final_loss_y", {});
  artifact.wall_time_sec =
      detail::get_or<double>(manifest, "wall_time_sec", 0.0);
  const bool with_gamma = artifact.scheme == SchemeKind::OSM;
  artifact.nets.resize(artifact.grid.steps);
  for (int n = 0; n < artifact.grid.steps; ++n) {
    artifact.nets[n].y = detail::load_net(dir, "y", n, role_tag::kY);
    artifact.nets[n].z = detail::load_net(dir, "z", n, role_tag::kZ);
    if (with_gamma)
      artifact.nets[n].gamma =
          detail::load_net(dir, "gamma", n, role_tag::kGamma);
  }
  return artifact;
}

}  // namespace bsdehedge
