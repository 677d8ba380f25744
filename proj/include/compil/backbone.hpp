#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "compil/gradcheck.hpp"
#include "compil/ops.hpp"
#include "compil/rng.hpp"
#include "compil/tensor.hpp"

namespace compil {

struct BackboneConfig {
  int image_side = 32;
  int patch_side = 8;
  int channels = 3;
  int embed_dim = 64;
  int n_layers = 4;
  int n_heads = 4;
  double mlp_ratio = 2.0;
  int max_prompt_tokens = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (image_side <= 0 || patch_side <= 0 || image_side % patch_side != 0)
      throw std::invalid_argument("backbone: image_side must be a positive multiple of patch_side");
    if (embed_dim <= 0 || n_heads <= 0 || embed_dim % n_heads != 0)
      throw std::invalid_argument("backbone: embed_dim must be divisible by n_heads");
    if (channels <= 0 || n_layers <= 0 || mlp_ratio <= 0 || max_prompt_tokens < 0)
      throw std::invalid_argument("backbone: non-positive dimension in config");
  }

  int patches_per_side() const { return image_side / patch_side; }
  int n_patches() const { return patches_per_side() * patches_per_side(); }
  int n_base_tokens() const { return n_patches() + 1; }  // class token + patches
  int patch_dim() const { return channels * patch_side * patch_side; }
};

// Frozen miniature transformer encoder. Plays the role of the pretrained
// backbone: an embedding layer, a query extractor reading the class token,
// and the encoder applied to prompt-extended sequences. Parameters are
// seeded at construction (truncated normal, std 0.02), never trained, and
// never receive gradients; gradients still flow through the encoder into
// prompt tokens. Immutable after construction, safe for concurrent reads.
template <typename T>
class FrozenEncoder {
 public:
  explicit FrozenEncoder(BackboneConfig config) : cfg_(config) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const int d = cfg_.embed_dim;
    const int hidden = static_cast<int>(d * cfg_.mlp_ratio);

    patch_w_ = init({cfg_.patch_dim(), d}, rng);
    patch_b_ = Tensor<T>::zeros({d});
    cls_ = init({1, d}, rng);
    pos_prompt_ = init({cfg_.max_prompt_tokens, d}, rng);
    pos_base_ = init({cfg_.n_base_tokens(), d}, rng);

    layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
    for (auto& l : layers_) {
      l.ln1_g = Tensor<T>::full({d}, T(1));
      l.ln1_b = Tensor<T>::zeros({d});
      l.wq = init({d, d}, rng);
      l.bq = Tensor<T>::zeros({d});
      l.wk = init({d, d}, rng);
      l.bk = Tensor<T>::zeros({d});
      l.wv = init({d, d}, rng);
      l.bv = Tensor<T>::zeros({d});
      l.wo = init({d, d}, rng);
      l.bo = Tensor<T>::zeros({d});
      l.ln2_g = Tensor<T>::full({d}, T(1));
      l.ln2_b = Tensor<T>::zeros({d});
      l.w1 = init({d, hidden}, rng);
      l.b1 = Tensor<T>::zeros({hidden});
      l.w2 = init({hidden, d}, rng);
      l.b2 = Tensor<T>::zeros({d});
    }
    lnf_g_ = Tensor<T>::full({d}, T(1));
    lnf_b_ = Tensor<T>::zeros({d});
  }

  const BackboneConfig& config() const { return cfg_; }

  // Class token + position-encoded patch tokens: [T+1, D].
  Tensor<T> embed(Tape<T>& tape, const Tensor<T>& image) const {
    check_image(image);
    const int ps = cfg_.patch_side, n_side = cfg_.patches_per_side();
    const int pd = cfg_.patch_dim(), np = cfg_.n_patches();
    Tensor<T> patches = Tensor<T>::zeros({np, pd});
    const int h = cfg_.image_side, w = cfg_.image_side;
    for (int pr = 0; pr < n_side; ++pr)
      for (int pc = 0; pc < n_side; ++pc) {
        const std::size_t row = static_cast<std::size_t>(pr * n_side + pc) * pd;
        std::size_t k = 0;
        for (int c = 0; c < cfg_.channels; ++c)
          for (int y = 0; y < ps; ++y)
            for (int x = 0; x < ps; ++x, ++k)
              patches[row + k] =
                  image[(static_cast<std::size_t>(c) * h + pr * ps + y) * w + pc * ps + x];
      }
    auto projected = add_rowvec(tape, matmul(tape, patches, patch_w_), patch_b_);
    auto tokens = concat_rows(tape, {cls_, projected});
    return add(tape, tokens, pos_base_);
  }

  // Runs the full frozen encoder without prompts and returns the class-token
  // output; never records gradient nodes (nothing on this path is trainable).
  Tensor<T> extract_query(Tape<T>& tape, const Tensor<T>& image) const {
    auto out = encode(tape, embed(tape, image));
    return reshape(tape, slice_rows(tape, out, 0, 1), {cfg_.embed_dim});
  }

  // Encoder over [P_c; P_s; P_o; x_e]; adds the frozen prompt-position
  // encodings to the first n_prompt_rows rows, then runs the block stack.
  Tensor<T> encode_extended(Tape<T>& tape, const Tensor<T>& x_p, int n_prompt_rows) const {
    detail::require_rank2("encode_extended", x_p);
    if (x_p.cols() != cfg_.embed_dim)
      throw std::invalid_argument("encode_extended: embed dim mismatch");
    if (x_p.rows() != n_prompt_rows + cfg_.n_base_tokens())
      throw std::invalid_argument(
          "encode_extended: token count " + std::to_string(x_p.rows()) + " != " +
          std::to_string(n_prompt_rows) + " prompt rows + " +
          std::to_string(cfg_.n_base_tokens()) + " base tokens");
    if (n_prompt_rows < 0 || n_prompt_rows > cfg_.max_prompt_tokens)
      throw std::invalid_argument("encode_extended: prompt rows exceed max_prompt_tokens");
    Tensor<T> x = x_p;
    if (n_prompt_rows > 0) {
      auto prompts = slice_rows(tape, x_p, 0, n_prompt_rows);
      auto rest = slice_rows(tape, x_p, n_prompt_rows, x_p.rows());
      auto pe = slice_rows(tape, pos_prompt_, 0, n_prompt_rows);
      x = concat_rows(tape, {add(tape, prompts, pe), rest});
    }
    return encode(tape, x);
  }

  // Pre-LN transformer stack with a final layer norm.
  Tensor<T> encode(Tape<T>& tape, const Tensor<T>& tokens) const {
    const int d = cfg_.embed_dim, nh = cfg_.n_heads, hd = d / nh;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    Tensor<T> x = tokens;
    for (const auto& l : layers_) {
      auto h = layer_norm_rows(tape, x, l.ln1_g, l.ln1_b);
      auto q = add_rowvec(tape, matmul(tape, h, l.wq), l.bq);
      auto k = add_rowvec(tape, matmul(tape, h, l.wk), l.bk);
      auto v = add_rowvec(tape, matmul(tape, h, l.wv), l.bv);
      std::vector<Tensor<T>> heads;
      heads.reserve(static_cast<std::size_t>(nh));
      for (int hi = 0; hi < nh; ++hi) {
        auto qh = slice_cols(tape, q, hi * hd, (hi + 1) * hd);
        auto kh = slice_cols(tape, k, hi * hd, (hi + 1) * hd);
        auto vh = slice_cols(tape, v, hi * hd, (hi + 1) * hd);
        auto scores = mul_scalar(tape, matmul(tape, qh, transpose(tape, kh)), scale);
        heads.push_back(matmul(tape, softmax_rows(tape, scores), vh));
      }
      auto attn = add_rowvec(tape, matmul(tape, concat_cols(tape, heads), l.wo), l.bo);
      x = add(tape, x, attn);
      auto h2 = layer_norm_rows(tape, x, l.ln2_g, l.ln2_b);
      auto f = gelu(tape, add_rowvec(tape, matmul(tape, h2, l.w1), l.b1));
      auto mlp = add_rowvec(tape, matmul(tape, f, l.w2), l.b2);
      x = add(tape, x, mlp);
    }
    return layer_norm_rows(tape, x, lnf_g_, lnf_b_);
  }

  std::vector<NamedParam<T>> parameters() const {
    std::vector<NamedParam<T>> out;
    out.push_back({"patch_w", patch_w_});
    out.push_back({"patch_b", patch_b_});
    out.push_back({"cls", cls_});
    out.push_back({"pos_prompt", pos_prompt_});
    out.push_back({"pos_base", pos_base_});
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      out.push_back({p + "ln1_g", l.ln1_g});
      out.push_back({p + "ln1_b", l.ln1_b});
      out.push_back({p + "wq", l.wq});
      out.push_back({p + "bq", l.bq});
      out.push_back({p + "wk", l.wk});
      out.push_back({p + "bk", l.bk});
      out.push_back({p + "wv", l.wv});
      out.push_back({p + "bv", l.bv});
      out.push_back({p + "wo", l.wo});
      out.push_back({p + "bo", l.bo});
      out.push_back({p + "ln2_g", l.ln2_g});
      out.push_back({p + "ln2_b", l.ln2_b});
      out.push_back({p + "w1", l.w1});
      out.push_back({p + "b1", l.b1});
      out.push_back({p + "w2", l.w2});
      out.push_back({p + "b2", l.b2});
    }
    out.push_back({"lnf_g", lnf_g_});
    out.push_back({"lnf_b", lnf_b_});
    return out;
  }

  // FNV-1a over every parameter byte, in declaration order. Constant across
  // the whole experiment by the freeze contract.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : parameters())
      for (const T v : p.tensor.values()) {
        unsigned char bytes[sizeof(T)];
        std::memcpy(bytes, &v, sizeof(T));
        for (unsigned char b : bytes) {
          h ^= b;
          h *= 1099511628211ull;
        }
      }
    return h;
  }

  // Weight snapshot: config header then parameter arrays in declaration
  // order as little-endian 32-bit floats.
  void save_weights(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    const char magic[4] = {'C', 'B', 'W', '1'};
    out.write(magic, 4);
    auto put_i32 = [&](std::int32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    put_i32(cfg_.image_side);
    put_i32(cfg_.patch_side);
    put_i32(cfg_.channels);
    put_i32(cfg_.embed_dim);
    put_i32(cfg_.n_layers);
    put_i32(cfg_.n_heads);
    put_i32(cfg_.max_prompt_tokens);
    const double ratio = cfg_.mlp_ratio;
    out.write(reinterpret_cast<const char*>(&ratio), 8);
    out.write(reinterpret_cast<const char*>(&cfg_.seed), 8);
    for (const auto& p : parameters())
      for (const T v : p.tensor.values()) {
        const float f = static_cast<float>(v);
        out.write(reinterpret_cast<const char*>(&f), 4);
      }
    if (!out) throw std::runtime_error("failed writing " + path);
  }

  void load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "CBW1")
      throw std::runtime_error(path + ": not a backbone weight snapshot");
    auto get_i32 = [&] {
      std::int32_t v = 0;
      in.read(reinterpret_cast<char*>(&v), 4);
      return v;
    };
    BackboneConfig hdr;
    hdr.image_side = get_i32();
    hdr.patch_side = get_i32();
    hdr.channels = get_i32();
    hdr.embed_dim = get_i32();
    hdr.n_layers = get_i32();
    hdr.n_heads = get_i32();
    hdr.max_prompt_tokens = get_i32();
    in.read(reinterpret_cast<char*>(&hdr.mlp_ratio), 8);
    in.read(reinterpret_cast<char*>(&hdr.seed), 8);
    if (!in) throw std::runtime_error(path + ": truncated header");
    if (hdr.image_side != cfg_.image_side || hdr.patch_side != cfg_.patch_side ||
        hdr.channels != cfg_.channels || hdr.embed_dim != cfg_.embed_dim ||
        hdr.n_layers != cfg_.n_layers || hdr.n_heads != cfg_.n_heads ||
        hdr.max_prompt_tokens != cfg_.max_prompt_tokens)
      throw std::runtime_error(path + ": snapshot config does not match this encoder");
    for (auto& p : parameters())
      for (T& v : p.tensor.values()) {
        float f = 0;
        in.read(reinterpret_cast<char*>(&f), 4);
        if (!in) throw std::runtime_error(path + ": truncated parameter data");
        v = static_cast<T>(f);
      }
  }

 private:
  struct Layer {
    Tensor<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ln2_g, ln2_b, w1, b1, w2, b2;
  };

  static Tensor<T> init(Shape shape, std::mt19937_64& rng) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    fill_trunc_normal(t, rng, T(0.02));
    return t;
  }

  void check_image(const Tensor<T>& image) const {
    if (image.rank() != 3 || image.extent(0) != cfg_.channels ||
        image.extent(1) != cfg_.image_side || image.extent(2) != cfg_.image_side)
      throw std::invalid_argument("embed: expected image " +
                                  shape_str({cfg_.channels, cfg_.image_side, cfg_.image_side}) +
                                  ", got " + shape_str(image.shape()));
  }

  BackboneConfig cfg_;
  Tensor<T> patch_w_, patch_b_, cls_, pos_prompt_, pos_base_;
  std::vector<Layer> layers_;
  Tensor<T> lnf_g_, lnf_b_;
};

}  // namespace compil
