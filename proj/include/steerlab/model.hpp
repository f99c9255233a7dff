#pragma once

// Decomposed forward pass of a pre-LayerNorm GPT-2 style decoder.
//
// Every attention head's post-W_O output H^{l,h} and every FF neuron's
// coefficient m_i are materialized, so a sublayer output is exactly
//
//   attn_out = sum_h H^{l,h} + b_O        ff_out = sum_i m_i v_i + b_FF
//
// Steering multiplies listed H^{l,h} (all positions) or m_i by alpha before
// the residual add; patching replaces a listed (component, position)
// contribution with a supplied vector. Shared biases are never scaled.

#include <algorithm>
#include <compare>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerlab/errors.hpp"
#include "steerlab/numerics.hpp"
#include "steerlab/tokenizer.hpp"
#include "steerlab/weights.hpp"

namespace steerlab {

enum class ComponentKind { head, neuron };

struct ComponentId {
  ComponentKind kind = ComponentKind::head;
  int layer = 0;
  int index = 0;

  static ComponentId head(int layer, int h) { return {ComponentKind::head, layer, h}; }
  static ComponentId neuron(int layer, int i) { return {ComponentKind::neuron, layer, i}; }

  bool is_head() const { return kind == ComponentKind::head; }

  // "L9H10" / "L19N11"
  std::string label() const {
    return "L" + std::to_string(layer) + (is_head() ? "H" : "N") + std::to_string(index);
  }

  static ComponentId parse(const std::string& s) {
    int l = 0, i = 0;
    char k = 0;
    if (std::sscanf(s.c_str(), "L%d%c%d", &l, &k, &i) != 3 || (k != 'H' && k != 'N'))
      throw ComponentError("cannot parse component label '" + s + "'");
    return {k == 'H' ? ComponentKind::head : ComponentKind::neuron, l, i};
  }

  friend auto operator<=>(const ComponentId&, const ComponentId&) = default;
};

inline void to_json(nlohmann::json& j, const ComponentId& c) { j = c.label(); }
inline void from_json(const nlohmann::json& j, ComponentId& c) { c = ComponentId::parse(j.get<std::string>()); }

inline void validate_component(const ModelConfig& cfg, const ComponentId& c) {
  const int limit = c.is_head() ? cfg.n_heads : cfg.d_mlp;
  if (c.layer < 0 || c.layer >= cfg.n_layers || c.index < 0 || c.index >= limit)
    throw ComponentError("component " + c.label() + " is not valid for this model");
}

struct SteerEntry {
  ComponentId component;
  float alpha = 1.0f;
};

struct SteerPlan {
  std::vector<SteerEntry> entries;

  bool empty() const { return entries.empty(); }
  std::size_t size() const { return entries.size(); }
};

inline void to_json(nlohmann::json& j, const SteerEntry& e) { j = {{"component", e.component}, {"alpha", widen_decimal(e.alpha)}}; }
inline void from_json(const nlohmann::json& j, SteerEntry& e) {
  j.at("component").get_to(e.component);
  j.at("alpha").get_to(e.alpha);
}
inline void to_json(nlohmann::json& j, const SteerPlan& p) { j = {{"entries", p.entries}}; }
inline void from_json(const nlohmann::json& j, SteerPlan& p) { j.at("entries").get_to(p.entries); }

// Replaces the additive contribution of `component` at `position`.
struct Patch {
  ComponentId component;
  int position = 0;
  Vector value;  // d_model
};

using PatchSet = std::vector<Patch>;

struct Trace {
  std::vector<TokenId> tokens;
  // residual[l] is the stream entering layer l; residual[n_layers] is the
  // final stream before ln_final. Each is positions x d.
  std::vector<Matrix> residual;
  std::vector<Matrix> residual_mid;  // after attention, before FF
  std::vector<Matrix> attn_out;      // sublayer outputs including bias
  std::vector<Matrix> ff_out;
  std::vector<std::vector<Matrix>> head_outputs;  // [layer][head]: positions x d
  std::vector<std::vector<Matrix>> attention;     // [layer][head]: positions x positions
  std::vector<Matrix> neuron_coefficients;        // [layer]: positions x d_mlp (post-GELU, post-steer)
  Vector logits;                                   // final position

  std::size_t length() const { return tokens.size(); }
  std::size_t last() const { return tokens.size() - 1; }
};

namespace detail {

inline void check_position(const Trace& t, int position) {
  if (position < 0 || static_cast<std::size_t>(position) >= t.length())
    throw IndexError("position " + std::to_string(position) + " out of range");
}

}  // namespace detail

// H^{l,h} at a position, shared output bias excluded.
inline std::span<const float> head_output(const Trace& t, int layer, int head, int position) {
  if (layer < 0 || static_cast<std::size_t>(layer) >= t.head_outputs.size() || head < 0 ||
      static_cast<std::size_t>(head) >= t.head_outputs[static_cast<std::size_t>(layer)].size())
    throw IndexError("head L" + std::to_string(layer) + "H" + std::to_string(head) + " out of range");
  detail::check_position(t, position);
  return t.head_outputs[static_cast<std::size_t>(layer)][static_cast<std::size_t>(head)].row(
      static_cast<std::size_t>(position));
}

inline float neuron_coefficient(const Trace& t, int layer, int neuron, int position) {
  if (layer < 0 || static_cast<std::size_t>(layer) >= t.neuron_coefficients.size())
    throw IndexError("layer " + std::to_string(layer) + " out of range");
  const auto& m = t.neuron_coefficients[static_cast<std::size_t>(layer)];
  if (neuron < 0 || static_cast<std::size_t>(neuron) >= m.cols())
    throw IndexError("neuron " + std::to_string(neuron) + " out of range");
  detail::check_position(t, position);
  return m(static_cast<std::size_t>(position), static_cast<std::size_t>(neuron));
}

// m_i * v_i, FF output bias excluded.
inline Vector neuron_contribution(const Weights& w, const Trace& t, int layer, int neuron, int position) {
  const float m = neuron_coefficient(t, layer, neuron, position);
  auto v = w.layers[static_cast<std::size_t>(layer)].w_ff_out.row(static_cast<std::size_t>(neuron));
  Vector out(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) out[j] = m * v[j];
  return out;
}

// The additive contribution a component wrote at a position.
inline Vector component_activation(const Weights& w, const Trace& t, const ComponentId& c, int position) {
  if (c.is_head()) {
    auto h = head_output(t, c.layer, c.index, position);
    return Vector(h.begin(), h.end());
  }
  return neuron_contribution(w, t, c.layer, c.index, position);
}

// Raw logit-lens projection h^T W_U (no final LayerNorm).
inline Vector project_logits(const Weights& w, std::span<const float> h) {
  if (h.size() != static_cast<std::size_t>(w.config.d_model))
    throw DimensionError("project_logits: expected a " + std::to_string(w.config.d_model) + "-vector, got " +
                         std::to_string(h.size()));
  Vector out(w.unembedding_rows.rows());
  for (std::size_t v = 0; v < out.size(); ++v) out[v] = dot(h, w.unembedding_rows.row(v));
  return out;
}

class Engine {
 public:
  explicit Engine(const Weights& weights) : w_(&weights) {}

  const Weights& weights() const { return *w_; }
  const ModelConfig& config() const { return w_->config; }

  Trace forward(std::span<const TokenId> tokens, const SteerPlan& plan = {}, const PatchSet& patches = {}) const {
    check_tokens(tokens);
    Trace t;
    t.tokens.assign(tokens.begin(), tokens.end());
    Matrix x = embed(tokens);
    run_layers(t, x, 0, plan, patches);
    return t;
  }

  // Re-runs layers [start_layer, L) on top of base.residual[start_layer];
  // earlier layers are reused from `base`. Patches/steering on layers before
  // start_layer are not applied, so callers must pick start_layer <= the
  // lowest intervened layer.
  Trace resume(const Trace& base, int start_layer, const SteerPlan& plan = {}, const PatchSet& patches = {}) const {
    if (start_layer < 0 || start_layer > config().n_layers) throw IndexError("resume: layer out of range");
    for (const auto& e : plan.entries)
      if (e.component.layer < start_layer) throw ComponentError("resume: steered " + e.component.label() + " precedes start layer");
    for (const auto& p : patches)
      if (p.component.layer < start_layer) throw ComponentError("resume: patched " + p.component.label() + " precedes start layer");
    Trace t;
    t.tokens = base.tokens;
    const auto s = static_cast<std::size_t>(start_layer);
    t.residual.assign(base.residual.begin(), base.residual.begin() + static_cast<std::ptrdiff_t>(s));
    t.residual_mid.assign(base.residual_mid.begin(), base.residual_mid.begin() + static_cast<std::ptrdiff_t>(s));
    t.attn_out.assign(base.attn_out.begin(), base.attn_out.begin() + static_cast<std::ptrdiff_t>(s));
    t.ff_out.assign(base.ff_out.begin(), base.ff_out.begin() + static_cast<std::ptrdiff_t>(s));
    t.head_outputs.assign(base.head_outputs.begin(), base.head_outputs.begin() + static_cast<std::ptrdiff_t>(s));
    t.attention.assign(base.attention.begin(), base.attention.begin() + static_cast<std::ptrdiff_t>(s));
    t.neuron_coefficients.assign(base.neuron_coefficients.begin(),
                                 base.neuron_coefficients.begin() + static_cast<std::ptrdiff_t>(s));
    Matrix x = base.residual.at(s);
    run_layers(t, x, start_layer, plan, patches);
    return t;
  }

  Vector logits(std::span<const TokenId> tokens, const SteerPlan& plan = {}) const {
    return forward(tokens, plan).logits;
  }

  TokenId next_token(std::span<const TokenId> tokens, const SteerPlan& plan = {}) const {
    const auto l = logits(tokens, plan);
    return static_cast<TokenId>(argmax(l));
  }

  // Greedy continuation; the plan is applied at every step and position.
  std::vector<TokenId> greedy_decode(std::span<const TokenId> prompt, int max_new, const SteerPlan& plan = {}) const {
    if (max_new < 0) throw LengthError("max_new must be non-negative");
    if (prompt.size() + static_cast<std::size_t>(max_new) > static_cast<std::size_t>(config().max_positions))
      throw LengthError("prompt plus continuation exceeds the context of " + std::to_string(config().max_positions));
    std::vector<TokenId> seq(prompt.begin(), prompt.end());
    std::vector<TokenId> out;
    for (int step = 0; step < max_new; ++step) {
      const TokenId next = next_token(seq, plan);
      seq.push_back(next);
      out.push_back(next);
    }
    return out;
  }

 private:
  struct LayerInterventions {
    std::vector<float> head_alpha;    // empty when no head in this layer is steered
    std::vector<float> neuron_alpha;  // empty when no neuron in this layer is steered
    std::vector<const Patch*> head_patches;
    std::vector<const Patch*> neuron_patches;
  };

  void check_tokens(std::span<const TokenId> tokens) const {
    if (tokens.empty()) throw LengthError("forward needs at least one token");
    if (tokens.size() > static_cast<std::size_t>(config().max_positions))
      throw LengthError("input of " + std::to_string(tokens.size()) + " tokens exceeds max_positions " +
                        std::to_string(config().max_positions));
    for (TokenId id : tokens)
      if (id < 0 || id >= config().vocab_size) throw TokenError("token id " + std::to_string(id) + " out of range");
  }

  Matrix embed(std::span<const TokenId> tokens) const {
    const auto d = static_cast<std::size_t>(config().d_model);
    Matrix x(tokens.size(), d);
    for (std::size_t p = 0; p < tokens.size(); ++p) {
      auto te = w_->token_embedding.row(static_cast<std::size_t>(tokens[p]));
      auto pe = w_->position_embedding.row(p);
      auto row = x.row(p);
      for (std::size_t j = 0; j < d; ++j) row[j] = te[j] + pe[j];
    }
    return x;
  }

  std::vector<LayerInterventions> collect(const SteerPlan& plan, const PatchSet& patches, std::size_t n) const {
    const auto& c = config();
    std::vector<LayerInterventions> iv(static_cast<std::size_t>(c.n_layers));
    for (const auto& e : plan.entries) {
      validate_component(c, e.component);
      if (!(e.alpha > 0.0f)) throw ComponentError("steering multiplier for " + e.component.label() + " must be > 0");
      auto& li = iv[static_cast<std::size_t>(e.component.layer)];
      auto& alphas = e.component.is_head() ? li.head_alpha : li.neuron_alpha;
      if (alphas.empty()) alphas.assign(static_cast<std::size_t>(e.component.is_head() ? c.n_heads : c.d_mlp), 1.0f);
      alphas[static_cast<std::size_t>(e.component.index)] = e.alpha;
    }
    for (const auto& p : patches) {
      validate_component(c, p.component);
      if (p.position < 0 || static_cast<std::size_t>(p.position) >= n)
        throw IndexError("patch position " + std::to_string(p.position) + " out of range");
      if (p.value.size() != static_cast<std::size_t>(c.d_model))
        throw DimensionError("patch value for " + p.component.label() + " has wrong length");
      auto& li = iv[static_cast<std::size_t>(p.component.layer)];
      (p.component.is_head() ? li.head_patches : li.neuron_patches).push_back(&p);
    }
    return iv;
  }

  void run_layers(Trace& t, Matrix& x, int start_layer, const SteerPlan& plan, const PatchSet& patches) const {
    const auto& c = config();
    const std::size_t n = x.rows();
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto H = static_cast<std::size_t>(c.n_heads);
    const auto dh = static_cast<std::size_t>(c.d_head());
    const auto m = static_cast<std::size_t>(c.d_mlp);
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    const auto iv = collect(plan, patches, n);

    for (int l = start_layer; l < c.n_layers; ++l) {
      const auto& lw = w_->layers[static_cast<std::size_t>(l)];
      const auto& li = iv[static_cast<std::size_t>(l)];
      t.residual.push_back(x);

      // attention
      const Matrix a = layer_norm_rows(x, lw.ln_attn_gamma, lw.ln_attn_beta, c.layer_norm_eps);
      Matrix q = matmul(a, lw.w_query);
      Matrix k = matmul(a, lw.w_key);
      Matrix v = matmul(a, lw.w_value);
      add_row_bias(q, lw.b_query());
      add_row_bias(k, lw.b_key());
      add_row_bias(v, lw.b_value());

      std::vector<Matrix> heads(H, Matrix(n, d));
      std::vector<Matrix> patterns(H, Matrix(n, n));
      Vector scores(n);
      Vector z(dh);
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < n; ++i) {
          std::span<const float> qi(q.row(i).data() + off, dh);
          for (std::size_t j = 0; j < n; ++j) {
            scores[j] = j <= i ? dot(qi, std::span<const float>(k.row(j).data() + off, dh)) * scale
                               : -std::numeric_limits<float>::infinity();
          }
          const Vector probs = softmax(scores);
          std::copy(probs.begin(), probs.end(), patterns[h].row(i).begin());
          std::fill(z.begin(), z.end(), 0.0f);
          for (std::size_t j = 0; j <= i; ++j) axpy(probs[j], std::span<const float>(v.row(j).data() + off, dh), z);
          auto out = heads[h].row(i);
          for (std::size_t e = 0; e < dh; ++e) axpy(z[e], lw.w_out.row(off + e), out);
        }
      }
      for (const Patch* p : li.head_patches) {
        auto row = heads[static_cast<std::size_t>(p->component.index)].row(static_cast<std::size_t>(p->position));
        std::copy(p->value.begin(), p->value.end(), row.begin());
      }
      if (!li.head_alpha.empty()) {
        for (std::size_t h = 0; h < H; ++h) {
          const float alpha = li.head_alpha[h];
          if (alpha == 1.0f) continue;
          for (float& val : std::span<float>(heads[h].data(), heads[h].size())) val *= alpha;
        }
      }
      Matrix attn(n, d);
      for (std::size_t i = 0; i < n; ++i) {
        auto row = attn.row(i);
        for (std::size_t h = 0; h < H; ++h) {
          auto hr = heads[h].row(i);
          for (std::size_t j = 0; j < d; ++j) row[j] += hr[j];
        }
        for (std::size_t j = 0; j < d; ++j) row[j] += lw.b_out[j];
      }
      for (std::size_t i = 0; i < n; ++i) {
        auto xr = x.row(i);
        auto ar = attn.row(i);
        for (std::size_t j = 0; j < d; ++j) xr[j] += ar[j];
      }
      t.residual_mid.push_back(x);
      t.attn_out.push_back(std::move(attn));
      t.head_outputs.push_back(std::move(heads));
      t.attention.push_back(std::move(patterns));

      // feed-forward
      const Matrix b = layer_norm_rows(x, lw.ln_ff_gamma, lw.ln_ff_beta, c.layer_norm_eps);
      Matrix coeff = matmul(b, lw.w_in);
      add_row_bias(coeff, lw.b_in);
      for (float& val : std::span<float>(coeff.data(), coeff.size())) val = gelu(val);
      if (!li.neuron_alpha.empty()) {
        for (std::size_t i = 0; i < n; ++i) {
          auto row = coeff.row(i);
          for (std::size_t u = 0; u < m; ++u) row[u] *= li.neuron_alpha[u];
        }
      }
      Matrix ff = matmul(coeff, lw.w_ff_out);
      for (const Patch* p : li.neuron_patches) {
        // swap the neuron's contribution for the supplied vector
        const auto pos = static_cast<std::size_t>(p->position);
        const auto u = static_cast<std::size_t>(p->component.index);
        auto row = ff.row(pos);
        auto vi = lw.w_ff_out.row(u);
        const float mi = coeff(pos, u);
        for (std::size_t j = 0; j < d; ++j) row[j] += p->value[j] - mi * vi[j];
      }
      add_row_bias(ff, lw.b_ff_out);
      for (std::size_t i = 0; i < n; ++i) {
        auto xr = x.row(i);
        auto fr = ff.row(i);
        for (std::size_t j = 0; j < d; ++j) xr[j] += fr[j];
      }
      t.ff_out.push_back(std::move(ff));
      t.neuron_coefficients.push_back(std::move(coeff));
    }
    t.residual.push_back(x);
    const Vector final_ln = layer_norm(x.row(n - 1), w_->ln_final_gamma, w_->ln_final_beta, c.layer_norm_eps);
    t.logits.resize(w_->unembedding_rows.rows());
    for (std::size_t v = 0; v < t.logits.size(); ++v) t.logits[v] = dot(final_ln, w_->unembedding_rows.row(v));
  }

  const Weights* w_;
};

// JSON dump of attention patterns and final-position component activations.
inline nlohmann::json export_trace(const Trace& t, const Tokenizer* tok = nullptr) {
  nlohmann::json j;
  j["tokens"] = t.tokens;
  if (tok) {
    std::vector<std::string> text;
    for (TokenId id : t.tokens) text.push_back(tok->decode(id));
    j["token_text"] = text;
  }
  const std::size_t last = t.last();
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < t.head_outputs.size(); ++l) {
    nlohmann::json heads = nlohmann::json::array();
    for (std::size_t h = 0; h < t.head_outputs[l].size(); ++h) {
      const auto& pat = t.attention[l][h];
      std::vector<std::vector<float>> rows;
      for (std::size_t i = 0; i < pat.rows(); ++i) rows.emplace_back(pat.row(i).begin(), pat.row(i).end());
      auto out = t.head_outputs[l][h].row(last);
      heads.push_back({{"head", h}, {"attention", rows}, {"last_output", std::vector<float>(out.begin(), out.end())}});
    }
    auto coeff = t.neuron_coefficients[l].row(last);
    layers.push_back({{"layer", l},
                      {"heads", heads},
                      {"last_neuron_coefficients", std::vector<float>(coeff.begin(), coeff.end())}});
  }
  j["layers"] = layers;
  j["final_logits_argmax"] = argmax(t.logits);
  return j;
}

}  // namespace steerlab
