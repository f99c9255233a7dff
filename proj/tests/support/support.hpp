#pragma once

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <random>
#include <string>

#include <unistd.h>

#include "steerlab/model.hpp"
#include "steerlab/tokenizer.hpp"
#include "steerlab/weights.hpp"

namespace steerlab::fixtures {

inline std::filesystem::path data_dir() { return STEERLAB_TEST_DATA; }
inline std::filesystem::path tiny_bundle() { return data_dir() / "tiny_gpt2"; }

inline const Tokenizer& gpt2_tokenizer() {
  static const Tokenizer tok =
      Tokenizer::load(data_dir() / "gpt2_tokenizer" / "vocab.json", data_dir() / "gpt2_tokenizer" / "merges.txt");
  return tok;
}

// Optional real-model bundles, provisioned by the weight fetcher.
inline std::optional<std::filesystem::path> env_bundle(const char* var) {
  const char* v = std::getenv(var);
  if (!v || !*v) return std::nullopt;
  std::filesystem::path p(v);
  if (!std::filesystem::exists(p / "model.tensors")) return std::nullopt;
  return p;
}

inline ModelConfig small_config(int vocab = 50257, int layers = 2, int heads = 4, int d = 16, int positions = 64) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d;
  c.d_mlp = 4 * d;
  c.vocab_size = vocab;
  c.max_positions = positions;
  return c;
}

// Gaussian weights; LayerNorm gains near 1.
inline Weights random_weights(const ModelConfig& c, std::uint64_t seed, float scale = 0.3f) {
  c.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  const auto V = static_cast<std::size_t>(c.vocab_size), d = static_cast<std::size_t>(c.d_model),
             m = static_cast<std::size_t>(c.d_mlp), P = static_cast<std::size_t>(c.max_positions);
  auto vec = [&](std::size_t n, float s, float base = 0.0f) {
    Vector v(n);
    for (auto& x : v) x = base + s * nd(rng);
    return v;
  };
  auto mat = [&](std::size_t r, std::size_t k, float s) { return Matrix(r, k, vec(r * k, s)); };
  Weights w;
  w.config = c;
  w.token_embedding = mat(V, d, scale);
  w.position_embedding = mat(P, d, scale);
  for (int l = 0; l < c.n_layers; ++l) {
    LayerWeights lw;
    lw.ln_attn_gamma = vec(d, 0.1f, 1.0f);
    lw.ln_attn_beta = vec(d, 0.05f);
    lw.w_query = mat(d, d, scale);
    lw.w_key = mat(d, d, scale);
    lw.w_value = mat(d, d, scale);
    lw.b_qkv = vec(3 * d, 0.05f);
    lw.w_out = mat(d, d, scale);
    lw.b_out = vec(d, 0.05f);
    lw.ln_ff_gamma = vec(d, 0.1f, 1.0f);
    lw.ln_ff_beta = vec(d, 0.05f);
    lw.w_in = mat(d, m, scale);
    lw.b_in = vec(m, 0.05f);
    lw.w_ff_out = mat(m, d, scale);
    lw.b_ff_out = vec(d, 0.05f);
    w.layers.push_back(std::move(lw));
  }
  w.ln_final_gamma = vec(d, 0.1f, 1.0f);
  w.ln_final_beta = vec(d, 0.05f);
  w.unembedding_rows = w.token_embedding;
  return w;
}

inline void copy_gpt2_tokenizer(const std::filesystem::path& bundle) {
  namespace fs = std::filesystem;
  fs::create_directories(bundle);
  for (const char* f : {"vocab.json", "merges.txt"})
    fs::copy_file(data_dir() / "gpt2_tokenizer" / f, bundle / f, fs::copy_options::overwrite_existing);
}

// Random small model over the real GPT-2 vocabulary, written as a bundle.
inline void write_synthetic_bundle(const std::filesystem::path& bundle, std::uint64_t seed = 11) {
  save_bundle(bundle, random_weights(small_config(), seed));
  copy_gpt2_tokenizer(bundle);
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("steerlab_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace steerlab::fixtures
