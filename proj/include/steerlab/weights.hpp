#pragma once

// Model bundle: a directory holding
//
//   config.json     architecture hyperparameters
//   vocab.json      tokenizer vocabulary (token -> id)
//   merges.txt      ranked BPE merges
//   model.tensors   named-tensor container (see tensor_file.hpp)
//   manifest.json   per-tensor checksums
//
// Projections are stored in math orientation (x @ W). Per-head attention
// matrices are stored split by head; in memory they are kept fused with head
// h occupying columns [h*d_head, (h+1)*d_head) of W_Query/W_Key/W_Value and
// rows [h*d_head, (h+1)*d_head) of W_O.

#include <array>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "steerlab/errors.hpp"
#include "steerlab/numerics.hpp"
#include "steerlab/tensor_file.hpp"

namespace steerlab {

struct ModelConfig {
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  int d_mlp = 0;
  int vocab_size = 0;
  int max_positions = 0;
  double layer_norm_eps = 1e-5;
  bool tied_embeddings = true;

  int d_head() const { return n_heads > 0 ? d_model / n_heads : 0; }

  void validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_mlp <= 0 || vocab_size <= 0 || max_positions <= 0)
      throw ValidationError("config: all sizes must be positive");
    if (d_model % n_heads != 0) throw ValidationError("config: d_model must equal n_heads * d_head");
    if (d_mlp != 4 * d_model) throw ValidationError("config: d_mlp must be 4 * d_model for the GPT-2 family");
    if (!(layer_norm_eps > 0.0)) throw ValidationError("config: layer_norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
       {"d_model", c.d_model},       {"d_mlp", c.d_mlp},
       {"vocab_size", c.vocab_size}, {"max_positions", c.max_positions},
       {"layer_norm_eps", c.layer_norm_eps}, {"tied_embeddings", c.tied_embeddings}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  try {
    j.at("n_layers").get_to(c.n_layers);
    j.at("n_heads").get_to(c.n_heads);
    j.at("d_model").get_to(c.d_model);
    j.at("d_mlp").get_to(c.d_mlp);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_positions").get_to(c.max_positions);
    j.at("layer_norm_eps").get_to(c.layer_norm_eps);
    j.at("tied_embeddings").get_to(c.tied_embeddings);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config.json: ") + e.what());
  }
}

struct LayerWeights {
  Vector ln_attn_gamma, ln_attn_beta;
  Matrix w_query, w_key, w_value;  // d x d, heads as column blocks
  Vector b_qkv;                    // 3d: query, key, value biases
  Matrix w_out;                    // d x d, heads as row blocks
  Vector b_out;
  Vector ln_ff_gamma, ln_ff_beta;
  Matrix w_in;   // d x d_mlp; column i is neuron i's input key
  Vector b_in;   // d_mlp
  Matrix w_ff_out;  // d_mlp x d; row i is neuron i's value vector v_i
  Vector b_ff_out;  // d

  std::span<const float> b_query() const { return {b_qkv.data(), b_qkv.size() / 3}; }
  std::span<const float> b_key() const { return {b_qkv.data() + b_qkv.size() / 3, b_qkv.size() / 3}; }
  std::span<const float> b_value() const { return {b_qkv.data() + 2 * b_qkv.size() / 3, b_qkv.size() / 3}; }
};

struct Weights {
  ModelConfig config;
  Matrix token_embedding;     // |V| x d
  Matrix position_embedding;  // max_positions x d
  std::vector<LayerWeights> layers;
  Vector ln_final_gamma, ln_final_beta;
  // W_U stored transposed (|V| x d) so a token's unembedding direction is a
  // contiguous row. Equal to token_embedding when embeddings are tied.
  Matrix unembedding_rows;

  float w_u(std::size_t dim, std::size_t token) const { return unembedding_rows(token, dim); }

  Matrix query_slice(int layer, int head) const { return head_columns(layers.at(layer).w_query, head); }
  Matrix key_slice(int layer, int head) const { return head_columns(layers.at(layer).w_key, head); }
  Matrix value_slice(int layer, int head) const { return head_columns(layers.at(layer).w_value, head); }
  Matrix out_slice(int layer, int head) const {
    check_head(head);
    const auto dh = static_cast<std::size_t>(config.d_head());
    return layers.at(layer).w_out.row_block(static_cast<std::size_t>(head) * dh, dh);
  }

 private:
  void check_head(int head) const {
    if (head < 0 || head >= config.n_heads) throw IndexError("head " + std::to_string(head) + " out of range");
  }
  Matrix head_columns(const Matrix& m, int head) const {
    check_head(head);
    const auto dh = static_cast<std::size_t>(config.d_head());
    return m.column_block(static_cast<std::size_t>(head) * dh, dh);
  }
};

namespace tensor_names {
inline std::string layer(int l, const char* suffix) { return "layers." + std::to_string(l) + "." + suffix; }
inline constexpr const char* token_embedding = "token_embedding";
inline constexpr const char* position_embedding = "position_embedding";
inline constexpr const char* ln_final_gamma = "ln_final.gamma";
inline constexpr const char* ln_final_beta = "ln_final.beta";
inline constexpr const char* unembedding = "unembedding";
}  // namespace tensor_names

namespace detail {

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw BundleError("missing bundle file " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string shape_string(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

inline std::vector<float> read_checked(const TensorFile& f, const std::string& name,
                                       const std::vector<std::size_t>& shape) {
  if (!f.contains(name)) throw ValidationError("tensor " + name + " missing from container");
  const auto& info = f.info(name);
  if (info.shape != shape)
    throw ValidationError("tensor " + name + " has shape " + shape_string(info.shape) + ", expected " +
                          shape_string(shape));
  return f.read(name);
}

// [n_heads, d, d_head] -> d x d with head blocks as columns
inline Matrix fuse_head_columns(const std::vector<float>& split, std::size_t heads, std::size_t d, std::size_t dh) {
  Matrix m(d, heads * dh);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < dh; ++c) m(r, h * dh + c) = split[(h * d + r) * dh + c];
  return m;
}

inline std::vector<float> split_head_columns(const Matrix& m, std::size_t heads, std::size_t dh) {
  const std::size_t d = m.rows();
  std::vector<float> out(heads * d * dh);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < dh; ++c) out[(h * d + r) * dh + c] = m(r, h * dh + c);
  return out;
}

}  // namespace detail

inline ModelConfig read_config(const std::filesystem::path& bundle) {
  const auto text = detail::read_text_file(bundle / "config.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config.json is not valid JSON: ") + e.what());
  }
  auto cfg = j.get<ModelConfig>();
  cfg.validate();
  return cfg;
}

inline Weights load_bundle(const std::filesystem::path& bundle) {
  for (const char* f : {"config.json", "vocab.json", "merges.txt", "model.tensors"})
    if (!std::filesystem::exists(bundle / f)) throw BundleError("bundle " + bundle.string() + " is missing " + f);

  Weights w;
  w.config = read_config(bundle);
  const auto& c = w.config;
  const auto L = static_cast<std::size_t>(c.n_layers);
  const auto H = static_cast<std::size_t>(c.n_heads);
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head());
  const auto m = static_cast<std::size_t>(c.d_mlp);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto P = static_cast<std::size_t>(c.max_positions);

  const auto file = TensorFile::open(bundle / "model.tensors");
  using detail::read_checked;
  namespace tn = tensor_names;

  w.token_embedding = Matrix(V, d, read_checked(file, tn::token_embedding, {V, d}));
  w.position_embedding = Matrix(P, d, read_checked(file, tn::position_embedding, {P, d}));
  w.layers.resize(L);
  for (std::size_t li = 0; li < L; ++li) {
    const int l = static_cast<int>(li);
    auto& lw = w.layers[li];
    lw.ln_attn_gamma = read_checked(file, tn::layer(l, "ln_attn.gamma"), {d});
    lw.ln_attn_beta = read_checked(file, tn::layer(l, "ln_attn.beta"), {d});
    lw.w_query = detail::fuse_head_columns(read_checked(file, tn::layer(l, "attn.w_query"), {H, d, dh}), H, d, dh);
    lw.w_key = detail::fuse_head_columns(read_checked(file, tn::layer(l, "attn.w_key"), {H, d, dh}), H, d, dh);
    lw.w_value = detail::fuse_head_columns(read_checked(file, tn::layer(l, "attn.w_value"), {H, d, dh}), H, d, dh);
    lw.b_qkv = read_checked(file, tn::layer(l, "attn.b_qkv"), {3 * d});
    // [H, dh, d] is already the row-block layout of a (H*dh) x d matrix
    lw.w_out = Matrix(d, d, read_checked(file, tn::layer(l, "attn.w_out"), {H, dh, d}));
    lw.b_out = read_checked(file, tn::layer(l, "attn.b_out"), {d});
    lw.ln_ff_gamma = read_checked(file, tn::layer(l, "ln_ff.gamma"), {d});
    lw.ln_ff_beta = read_checked(file, tn::layer(l, "ln_ff.beta"), {d});
    lw.w_in = Matrix(d, m, read_checked(file, tn::layer(l, "ff.w_in"), {d, m}));
    lw.b_in = read_checked(file, tn::layer(l, "ff.b_in"), {m});
    lw.w_ff_out = Matrix(m, d, read_checked(file, tn::layer(l, "ff.w_out"), {m, d}));
    lw.b_ff_out = read_checked(file, tn::layer(l, "ff.b_out"), {d});
  }
  w.ln_final_gamma = read_checked(file, tn::ln_final_gamma, {d});
  w.ln_final_beta = read_checked(file, tn::ln_final_beta, {d});

  if (file.contains(tn::unembedding)) {
    Matrix wu(d, V, read_checked(file, tn::unembedding, {d, V}));
    w.unembedding_rows = wu.transposed();
    if (c.tied_embeddings && !(w.unembedding_rows == w.token_embedding))
      throw ValidationError("tensor unembedding differs from token_embedding^T but config declares tied embeddings");
  } else if (c.tied_embeddings) {
    w.unembedding_rows = w.token_embedding;
  } else {
    throw ValidationError("tensor unembedding missing and embeddings are not tied");
  }
  return w;
}

inline void write_manifest(const std::filesystem::path& bundle);

// Writes config.json, model.tensors and manifest.json. Tokenizer files are
// the caller's responsibility.
inline void save_bundle(const std::filesystem::path& bundle, const Weights& w) {
  std::filesystem::create_directories(bundle);
  const auto& c = w.config;
  c.validate();
  {
    std::ofstream out(bundle / "config.json");
    if (!out) throw BundleError("cannot write " + (bundle / "config.json").string());
    out << nlohmann::json(c).dump(2) << "\n";
  }
  const auto H = static_cast<std::size_t>(c.n_heads);
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head());
  const auto m = static_cast<std::size_t>(c.d_mlp);
  namespace tn = tensor_names;

  std::vector<TensorBlob> blobs;
  auto add = [&](std::string name, std::vector<std::size_t> shape, std::vector<float> data) {
    blobs.push_back({std::move(name), std::move(shape), std::move(data)});
  };
  add(tn::token_embedding, {w.token_embedding.rows(), d}, w.token_embedding.storage());
  add(tn::position_embedding, {w.position_embedding.rows(), d}, w.position_embedding.storage());
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& lw = w.layers.at(static_cast<std::size_t>(l));
    add(tn::layer(l, "ln_attn.gamma"), {d}, lw.ln_attn_gamma);
    add(tn::layer(l, "ln_attn.beta"), {d}, lw.ln_attn_beta);
    add(tn::layer(l, "attn.w_query"), {H, d, dh}, detail::split_head_columns(lw.w_query, H, dh));
    add(tn::layer(l, "attn.w_key"), {H, d, dh}, detail::split_head_columns(lw.w_key, H, dh));
    add(tn::layer(l, "attn.w_value"), {H, d, dh}, detail::split_head_columns(lw.w_value, H, dh));
    add(tn::layer(l, "attn.b_qkv"), {3 * d}, lw.b_qkv);
    add(tn::layer(l, "attn.w_out"), {H, dh, d}, lw.w_out.storage());
    add(tn::layer(l, "attn.b_out"), {d}, lw.b_out);
    add(tn::layer(l, "ln_ff.gamma"), {d}, lw.ln_ff_gamma);
    add(tn::layer(l, "ln_ff.beta"), {d}, lw.ln_ff_beta);
    add(tn::layer(l, "ff.w_in"), {d, m}, lw.w_in.storage());
    add(tn::layer(l, "ff.b_in"), {m}, lw.b_in);
    add(tn::layer(l, "ff.w_out"), {m, d}, lw.w_ff_out.storage());
    add(tn::layer(l, "ff.b_out"), {d}, lw.b_ff_out);
  }
  add(tn::ln_final_gamma, {d}, w.ln_final_gamma);
  add(tn::ln_final_beta, {d}, w.ln_final_beta);
  if (!c.tied_embeddings) add(tn::unembedding, {d, w.unembedding_rows.rows()}, w.unembedding_rows.transposed().storage());
  write_tensor_file(bundle / "model.tensors", blobs);
  write_manifest(bundle);
}

// ---------------------------------------------------------------------------
// Checksum manifest

struct ManifestEntry {
  std::string name;
  std::string dtype;
  std::vector<std::size_t> shape;
  std::string sha256;  // lowercase hex of the raw payload bytes

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  std::vector<ManifestEntry> tensors;  // sorted by name

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

inline void to_json(nlohmann::json& j, const ManifestEntry& e) {
  j = {{"name", e.name}, {"dtype", e.dtype}, {"shape", e.shape}, {"sha256", e.sha256}};
}
inline void from_json(const nlohmann::json& j, ManifestEntry& e) {
  j.at("name").get_to(e.name);
  j.at("dtype").get_to(e.dtype);
  j.at("shape").get_to(e.shape);
  j.at("sha256").get_to(e.sha256);
}
inline void to_json(nlohmann::json& j, const Manifest& m) { j = {{"tensors", m.tensors}}; }
inline void from_json(const nlohmann::json& j, Manifest& m) { j.at("tensors").get_to(m.tensors); }

inline std::string sha256_hex(std::span<const std::byte> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 digest failed");
  std::ostringstream ss;
  for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return ss.str();
}

inline Manifest checksum_manifest(const std::filesystem::path& bundle) {
  const auto file = TensorFile::open(bundle / "model.tensors");
  Manifest m;
  for (const auto& t : file.tensors())
    m.tensors.push_back({t.name, t.dtype, t.shape, sha256_hex(file.read_bytes(t.name))});
  std::sort(m.tensors.begin(), m.tensors.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  return m;
}

inline void write_manifest(const std::filesystem::path& bundle) {
  std::ofstream out(bundle / "manifest.json");
  if (!out) throw BundleError("cannot write manifest.json");
  out << nlohmann::json(checksum_manifest(bundle)).dump(2) << "\n";
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(detail::read_text_file(path)).get<Manifest>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace steerlab
