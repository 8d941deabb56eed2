#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "noisetrap/error.hpp"
#include "noisetrap/lm/config.hpp"
#include "noisetrap/lm/model.hpp"

namespace noisetrap::lm {

// Checkpoint container, all integers little-endian:
//   bytes 0..7   magic "NTRAPCK\0"
//   u32          format version
//   u32          header length H
//   H bytes      UTF-8 JSON: {"config":{...},"recipe":{...},"iter":N,"n_params":P,"blocks":[...]}
//   P * 4 bytes  float32 parameters in ParamLayout order
inline constexpr std::array<char, 8> kCheckpointMagic = {'N', 'T', 'R', 'A', 'P', 'C', 'K', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const LmConfig& c) {
  return {{"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"d_model", c.d_model},
          {"context_len", c.context_len}, {"vocab_size", c.vocab_size}, {"dropout", c.dropout}};
}

inline LmConfig config_from_json(const nlohmann::json& j) {
  LmConfig c;
  c.n_layers = j.at("n_layers").get<std::uint32_t>();
  c.n_heads = j.at("n_heads").get<std::uint32_t>();
  c.d_model = j.at("d_model").get<std::uint32_t>();
  c.context_len = j.at("context_len").get<std::uint32_t>();
  c.vocab_size = j.at("vocab_size").get<std::uint32_t>();
  c.dropout = j.at("dropout").get<double>();
  return c;
}

inline nlohmann::json to_json(const TrainRecipe& r) {
  return {{"lr_max", r.lr_max}, {"lr_min", r.lr_min}, {"weight_decay", r.weight_decay},
          {"beta1", r.beta1}, {"beta2", r.beta2}, {"adam_eps", r.adam_eps}, {"grad_clip", r.grad_clip},
          {"batch_size", r.batch_size}, {"grad_accum_steps", r.grad_accum_steps},
          {"warmup_iters", r.effective_warmup()}, {"total_iters", r.total_iters},
          {"eval_interval", r.eval_interval}, {"eval_windows", r.eval_windows}, {"seed", r.seed}};
}

inline TrainRecipe recipe_from_json(const nlohmann::json& j) {
  TrainRecipe r;
  r.lr_max = j.at("lr_max").get<double>();
  r.lr_min = j.at("lr_min").get<double>();
  r.weight_decay = j.at("weight_decay").get<double>();
  r.beta1 = j.at("beta1").get<double>();
  r.beta2 = j.at("beta2").get<double>();
  r.adam_eps = j.at("adam_eps").get<double>();
  r.grad_clip = j.at("grad_clip").get<double>();
  r.batch_size = j.at("batch_size").get<std::uint32_t>();
  r.grad_accum_steps = j.at("grad_accum_steps").get<std::uint32_t>();
  r.warmup_iters = j.at("warmup_iters").get<std::uint32_t>();
  r.total_iters = j.at("total_iters").get<std::uint32_t>();
  r.eval_interval = j.at("eval_interval").get<std::uint32_t>();
  r.eval_windows = j.at("eval_windows").get<std::uint32_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

struct Checkpoint {
  LmParams<float> params;
  TrainRecipe recipe;
  std::uint32_t iter = 0;
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw corrupt_file("checkpoint truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const LmParams<float>& params,
                            const TrainRecipe& recipe, std::uint32_t iter) {
  nlohmann::json header = {{"config", to_json(params.config)}, {"recipe", to_json(recipe)}, {"iter", iter},
                           {"n_params", params.data.size()}};
  for (const auto& b : params.layout.blocks()) header["blocks"].push_back({b.name, b.rows, b.cols});
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw invalid_argument("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (float v : params.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw invalid_argument("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kCheckpointMagic) throw corrupt_file("not a checkpoint file");
  const std::uint32_t version = detail::get_u32(in);
  if (version != kCheckpointVersion) throw unsupported("checkpoint format version " + std::to_string(version));
  const std::uint32_t hlen = detail::get_u32(in);
  std::string text(hlen, '\0');
  if (!in.read(text.data(), hlen)) throw corrupt_file("checkpoint header truncated");
  const auto header = nlohmann::json::parse(text);
  Checkpoint ck{LmParams<float>(config_from_json(header.at("config"))), recipe_from_json(header.at("recipe")),
                header.at("iter").get<std::uint32_t>()};
  if (header.at("n_params").get<std::size_t>() != ck.params.data.size()) {
    throw corrupt_file("checkpoint parameter count does not match its config");
  }
  for (float& v : ck.params.data) v = std::bit_cast<float>(detail::get_u32(in));
  return ck;
}

}  // namespace noisetrap::lm
