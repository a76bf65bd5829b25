#pragma once

// Conditional UNet predicting the clean mask x0_hat from the noisy mask, the
// timestep, the scene image and the clean start/goal channels.
//
// Input: concat(x_t[3], image[3], condition[2]) -> 8 channels.
// Encoder levels l = 0..depth-1 at resolution H / 2^l with width base * 2^l,
// a middle block at H / 2^depth, and a mirrored decoder with skip
// concatenation at every encoder level. The timestep enters through a
// sinusoidal embedding, a two-layer SiLU MLP, and a per-block projection added
// after the first convolution of every residual block.

#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajdiff/dataset.hpp"
#include "trajdiff/error.hpp"
#include "trajdiff/nn.hpp"
#include "trajdiff/tensor.hpp"

namespace trajdiff {

inline constexpr int kInputChannels = 8;
inline constexpr int kOutputChannels = 3;

struct Architecture {
  int base_width = 16;
  int depth = 4;
  int time_dim = 32;
  int num_steps = 100;  // timesteps the network was built for

  int emb_dim() const { return 4 * base_width; }
  int width(int level) const { return base_width << level; }

  void validate() const {
    detail::require(base_width >= 1 && depth >= 1 && depth <= 6, "bad architecture widths/depth");
    detail::require(time_dim >= 2 && time_dim % 2 == 0, "time_dim must be even");
    detail::require(num_steps >= 1, "num_steps must be >= 1");
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

inline void to_json(nlohmann::json& j, const Architecture& a) {
  j = {{"kind", "unet"},
       {"in_channels", kInputChannels},
       {"out_channels", kOutputChannels},
       {"base_width", a.base_width},
       {"depth", a.depth},
       {"time_dim", a.time_dim},
       {"emb_dim", a.emb_dim()},
       {"num_steps", a.num_steps}};
}

inline void from_json(const nlohmann::json& j, Architecture& a) {
  if (j.value("kind", std::string("unet")) != "unet") throw FormatError("unknown architecture kind");
  if (j.value("in_channels", kInputChannels) != kInputChannels ||
      j.value("out_channels", kOutputChannels) != kOutputChannels) {
    throw FormatError("architecture channel counts do not match this build");
  }
  a.base_width = j.at("base_width").get<int>();
  a.depth = j.at("depth").get<int>();
  a.time_dim = j.at("time_dim").get<int>();
  a.num_steps = j.at("num_steps").get<int>();
}

template <typename T>
struct DenoiserInput {
  Tensor3<T> x_t;        // (3, H, W)
  int t = 1;
  Tensor3<T> image;      // (3, H, W)
  Tensor3<T> condition;  // (2, H, W): clean start and goal channels
};

/// Clean start/goal channels of a mask, as conditioning input.
template <typename T>
Tensor3<T> condition_from_mask(const Mask& mask) {
  Tensor3<T> c(2, mask.height, mask.width);
  for (std::size_t i = 0; i < mask.plane(); ++i) {
    c.data[i] = static_cast<T>(mask.data[i]);
    c.data[mask.plane() + i] = static_cast<T>(mask.data[mask.plane() + i]);
  }
  return c;
}

template <typename T>
class Denoiser {
 public:
  using Store = nn::ParamStore<T>;

  explicit Denoiser(Architecture arch = {}, std::uint64_t init_seed = 0) : arch_(arch) {
    arch_.validate();
    build();
    reset(init_seed);
  }

  const Architecture& architecture() const { return arch_; }
  Store& params() { return store_; }
  const Store& params() const { return store_; }
  std::size_t parameter_count() const { return store_.count(); }

  void reset(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    time_fc1_.reset(store_, rng);
    time_fc2_.reset(store_, rng);
    for (auto* b : all_blocks()) b->reset(store_, rng);
    out_conv_.reset(store_, rng, 0.1);
  }

  /// Per-call activations. Reusing one workspace across calls avoids reallocation.
  struct Workspace;

  Tensor3<T> predict(const DenoiserInput<T>& in) const {
    Workspace ws;
    return predict(in, ws);
  }

  Tensor3<T> predict(const DenoiserInput<T>& in, Workspace& ws) const {
    validate_input(in);
    forward(in, ws);
    return ws.output;
  }

  /// Forward pass that keeps everything backward() needs in `ws`.
  void forward(const DenoiserInput<T>& in, Workspace& ws) const;

  /// Accumulates parameter gradients for d(loss)/d(output) = dout.
  void backward(const Tensor3<T>& dout, Workspace& ws);

  void validate_input(const DenoiserInput<T>& in) const {
    const auto& x = in.x_t;
    if (x.channels != 3 || in.image.channels != 3 || in.condition.channels != 2) {
      throw InvalidArgument("denoiser input: expected 3/3/2 channels");
    }
    if (in.image.height != x.height || in.image.width != x.width || in.condition.height != x.height ||
        in.condition.width != x.width) {
      throw InvalidArgument("denoiser input: spatial shapes differ");
    }
    const int div = 1 << arch_.depth;
    if (x.height % div != 0 || x.width % div != 0) {
      throw InvalidArgument("denoiser input: spatial size must be divisible by 2^depth");
    }
    if (in.t < 1 || in.t > arch_.num_steps) throw InvalidArgument("denoiser input: timestep out of range");
  }

 private:
  struct ResBlock {
    int cin = 0, cout = 0;
    nn::Conv2d<T> conv1, conv2, skip;
    nn::GroupNorm<T> norm1, norm2;
    nn::Linear<T> temb;
    bool has_skip = false;

    struct Cache {
      const T* x = nullptr;
      int h = 0, w = 0;
      std::vector<T> col1, pre1, h1, col2, pre2;
      typename nn::GroupNorm<T>::Cache gn1, gn2;
    };

    void init(Store& ps, const std::string& name, int in, int out, int emb) {
      cin = in;
      cout = out;
      conv1.init(ps, name + ".conv1", in, out, 3);
      norm1.init(ps, name + ".norm1", out);
      temb.init(ps, name + ".temb", emb, out);
      conv2.init(ps, name + ".conv2", out, out, 3);
      norm2.init(ps, name + ".norm2", out);
      has_skip = in != out;
      if (has_skip) skip.init(ps, name + ".skip", in, out, 1);
    }

    void reset(Store& ps, std::mt19937_64& rng) const {
      conv1.reset(ps, rng);
      norm1.reset(ps);
      temb.reset(ps, rng, 0.5);
      conv2.reset(ps, rng);
      norm2.reset(ps);
      if (has_skip) skip.reset(ps, rng, 0.5);
    }

    void forward(const Store& ps, const T* x, int h, int w, const T* emb_act, T* out, Cache& c) const {
      const std::size_t hw = static_cast<std::size_t>(h) * w;
      c.x = x;
      c.h = h;
      c.w = w;
      c.pre1.resize(cout * hw);
      c.h1.resize(cout * hw);
      c.pre2.resize(cout * hw);
      std::vector<T> tmp(cout * hw);
      conv1.forward(ps, x, h, w, tmp.data(), c.col1);
      norm1.forward(ps, tmp.data(), static_cast<int>(hw), c.pre1.data(), c.gn1);
      std::vector<T> proj(cout);
      temb.forward(ps, emb_act, proj.data());
      for (int ch = 0; ch < cout; ++ch) {
        for (std::size_t i = 0; i < hw; ++i) c.h1[ch * hw + i] = nn::silu(c.pre1[ch * hw + i]) + proj[ch];
      }
      conv2.forward(ps, c.h1.data(), h, w, tmp.data(), c.col2);
      norm2.forward(ps, tmp.data(), static_cast<int>(hw), c.pre2.data(), c.gn2);
      if (has_skip) {
        std::vector<T> unused;
        skip.forward(ps, x, h, w, out, unused);
      } else {
        std::copy(x, x + cout * hw, out);
      }
      for (std::size_t i = 0; i < cout * hw; ++i) out[i] += nn::silu(c.pre2[i]);
    }

    /// dx and demb are accumulated into.
    void backward(Store& ps, const T* dout, const T* emb_act, Cache& c, T* dx, T* demb,
                  std::vector<T>& scratch) const {
      const std::size_t hw = static_cast<std::size_t>(c.h) * c.w;
      std::vector<T> d(cout * hw), da(cout * hw);
      for (std::size_t i = 0; i < cout * hw; ++i) d[i] = dout[i] * nn::silu_grad(c.pre2[i]);
      norm2.backward(ps, c.gn2, static_cast<int>(hw), d.data(), da.data());
      std::fill(d.begin(), d.end(), T(0));
      conv2.backward(ps, c.h1.data(), c.col2, c.h, c.w, da.data(), d.data(), scratch);  // d = dL/dh1
      std::vector<T> dproj(cout, T(0));
      for (int ch = 0; ch < cout; ++ch) {
        T s = 0;
        for (std::size_t i = 0; i < hw; ++i) s += d[ch * hw + i];
        dproj[ch] = s;
      }
      temb.backward(ps, emb_act, dproj.data(), demb);
      for (std::size_t i = 0; i < cout * hw; ++i) d[i] *= nn::silu_grad(c.pre1[i]);
      norm1.backward(ps, c.gn1, static_cast<int>(hw), d.data(), da.data());
      conv1.backward(ps, c.x, c.col1, c.h, c.w, da.data(), dx, scratch);
      if (has_skip) {
        std::vector<T> unused;
        skip.backward(ps, c.x, unused, c.h, c.w, dout, dx, scratch);
      } else if (dx) {
        for (std::size_t i = 0; i < cin * hw; ++i) dx[i] += dout[i];
      }
    }
  };

 public:
  struct Workspace {
    std::vector<T> input;
    std::vector<T> sinus, emb_pre1, emb_hidden, emb_pre2, emb_act;
    std::vector<std::vector<T>> enc_out, pooled, up, cat, dec_out;
    std::vector<T> mid_out;
    std::vector<typename ResBlock::Cache> enc_cache, dec_cache;
    typename ResBlock::Cache mid_cache;
    Tensor3<T> output;
    std::vector<T> scratch;
    int h = 0, w = 0;
  };

 private:
  std::vector<ResBlock*> all_blocks() {
    std::vector<ResBlock*> out;
    for (auto& b : enc_) out.push_back(&b);
    out.push_back(&mid_);
    for (auto& b : dec_) out.push_back(&b);
    return out;
  }

  void build() {
    const int emb = arch_.emb_dim();
    time_fc1_.init(store_, "time.fc1", arch_.time_dim, emb);
    time_fc2_.init(store_, "time.fc2", emb, emb);
    enc_.resize(arch_.depth);
    dec_.resize(arch_.depth);
    int prev = kInputChannels;
    for (int l = 0; l < arch_.depth; ++l) {
      enc_[l].init(store_, "enc" + std::to_string(l), prev, arch_.width(l), emb);
      prev = arch_.width(l);
    }
    mid_.init(store_, "mid", prev, arch_.width(arch_.depth), emb);
    prev = arch_.width(arch_.depth);
    for (int l = arch_.depth - 1; l >= 0; --l) {
      dec_[l].init(store_, "dec" + std::to_string(l), prev + arch_.width(l), arch_.width(l), emb);
      prev = arch_.width(l);
    }
    out_conv_.init(store_, "out", arch_.width(0), kOutputChannels, 1);
  }

  Architecture arch_;
  Store store_;
  nn::Linear<T> time_fc1_, time_fc2_;
  std::vector<ResBlock> enc_, dec_;
  ResBlock mid_;
  nn::Conv2d<T> out_conv_;
};

template <typename T>
void sinusoidal_embedding(int t, int dim, T* out) {
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * i / half);
    out[i] = static_cast<T>(std::sin(t * freq));
    out[half + i] = static_cast<T>(std::cos(t * freq));
  }
}

template <typename T>
void Denoiser<T>::forward(const DenoiserInput<T>& in, Workspace& ws) const {
  validate_input(in);
  const int H = in.x_t.height, W = in.x_t.width;
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  ws.h = H;
  ws.w = W;

  ws.input.resize(kInputChannels * hw);
  std::copy(in.x_t.data.begin(), in.x_t.data.end(), ws.input.begin());
  std::copy(in.image.data.begin(), in.image.data.end(), ws.input.begin() + 3 * hw);
  std::copy(in.condition.data.begin(), in.condition.data.end(), ws.input.begin() + 6 * hw);

  const int emb = arch_.emb_dim();
  ws.sinus.resize(arch_.time_dim);
  sinusoidal_embedding(in.t, arch_.time_dim, ws.sinus.data());
  ws.emb_pre1.resize(emb);
  ws.emb_hidden.resize(emb);
  ws.emb_pre2.resize(emb);
  ws.emb_act.resize(emb);
  time_fc1_.forward(store_, ws.sinus.data(), ws.emb_pre1.data());
  for (int i = 0; i < emb; ++i) ws.emb_hidden[i] = nn::silu(ws.emb_pre1[i]);
  time_fc2_.forward(store_, ws.emb_hidden.data(), ws.emb_pre2.data());
  for (int i = 0; i < emb; ++i) ws.emb_act[i] = nn::silu(ws.emb_pre2[i]);

  const int D = arch_.depth;
  ws.enc_out.resize(D);
  ws.pooled.resize(D);
  ws.up.resize(D);
  ws.cat.resize(D);
  ws.dec_out.resize(D);
  ws.enc_cache.resize(D);
  ws.dec_cache.resize(D);

  const T* x = ws.input.data();
  int h = H, w = W;
  for (int l = 0; l < D; ++l) {
    const int c = arch_.width(l);
    ws.enc_out[l].resize(static_cast<std::size_t>(c) * h * w);
    enc_[l].forward(store_, x, h, w, ws.emb_act.data(), ws.enc_out[l].data(), ws.enc_cache[l]);
    ws.pooled[l].resize(static_cast<std::size_t>(c) * (h / 2) * (w / 2));
    nn::avg_pool2(ws.enc_out[l].data(), c, h, w, ws.pooled[l].data());
    x = ws.pooled[l].data();
    h /= 2;
    w /= 2;
  }
  const int cm = arch_.width(D);
  ws.mid_out.resize(static_cast<std::size_t>(cm) * h * w);
  mid_.forward(store_, x, h, w, ws.emb_act.data(), ws.mid_out.data(), ws.mid_cache);

  const T* u = ws.mid_out.data();
  int cu = cm;
  for (int l = D - 1; l >= 0; --l) {
    const int c = arch_.width(l);
    const std::size_t fine = static_cast<std::size_t>(h) * w * 4;
    ws.up[l].resize(cu * fine);
    nn::upsample2(u, cu, h, w, ws.up[l].data());
    h *= 2;
    w *= 2;
    ws.cat[l].resize((cu + c) * fine);
    std::copy(ws.up[l].begin(), ws.up[l].end(), ws.cat[l].begin());
    std::copy(ws.enc_out[l].begin(), ws.enc_out[l].end(), ws.cat[l].begin() + cu * fine);
    ws.dec_out[l].resize(c * fine);
    dec_[l].forward(store_, ws.cat[l].data(), h, w, ws.emb_act.data(), ws.dec_out[l].data(), ws.dec_cache[l]);
    u = ws.dec_out[l].data();
    cu = c;
  }

  ws.output = Tensor3<T>(kOutputChannels, H, W);
  std::vector<T> unused;
  out_conv_.forward(store_, u, H, W, ws.output.data.data(), unused);
}

template <typename T>
void Denoiser<T>::backward(const Tensor3<T>& dout, Workspace& ws) {
  const int H = ws.h, W = ws.w, D = arch_.depth;
  if (dout.channels != kOutputChannels || dout.height != H || dout.width != W) {
    throw InvalidArgument("backward: gradient shape does not match the last forward pass");
  }
  const int emb = arch_.emb_dim();
  std::vector<T> demb(emb, T(0));
  std::vector<T> unused;

  std::vector<T> du(static_cast<std::size_t>(arch_.width(0)) * H * W, T(0));
  out_conv_.backward(store_, ws.dec_out[0].data(), unused, H, W, dout.data.data(), du.data(), ws.scratch);

  // Gradients flowing into each encoder output through the skip connections.
  std::vector<std::vector<T>> denc(D);
  int h = H, w = W;
  for (int l = 0; l < D; ++l) {
    const int c = arch_.width(l);
    const int cu = l == D - 1 ? arch_.width(D) : arch_.width(l + 1);
    const std::size_t fine = static_cast<std::size_t>(h) * w;
    std::vector<T> dcat((cu + c) * fine, T(0));
    dec_[l].backward(store_, du.data(), ws.emb_act.data(), ws.dec_cache[l], dcat.data(), demb.data(), ws.scratch);
    denc[l].assign(dcat.begin() + cu * fine, dcat.end());
    std::vector<T> dcoarse(cu * fine / 4, T(0));
    nn::upsample2_backward(dcat.data(), cu, h / 2, w / 2, dcoarse.data());
    du = std::move(dcoarse);
    h /= 2;
    w /= 2;
  }
  // du is now d(mid_out) at the coarsest scale.
  std::vector<T> dx(static_cast<std::size_t>(arch_.width(D - 1)) * h * w, T(0));
  mid_.backward(store_, du.data(), ws.emb_act.data(), ws.mid_cache, dx.data(), demb.data(), ws.scratch);

  for (int l = D - 1; l >= 0; --l) {
    const int c = arch_.width(l);
    nn::avg_pool2_backward(dx.data(), c, 2 * h, 2 * w, denc[l].data());
    h *= 2;
    w *= 2;
    // The network input needs no gradient.
    const int cin = l == 0 ? 0 : arch_.width(l - 1);
    std::vector<T> dprev(static_cast<std::size_t>(cin) * h * w, T(0));
    enc_[l].backward(store_, denc[l].data(), ws.emb_act.data(), ws.enc_cache[l], l == 0 ? nullptr : dprev.data(),
                     demb.data(), ws.scratch);
    dx = std::move(dprev);
  }

  std::vector<T> dpre2(emb), dhidden(emb, T(0));
  for (int i = 0; i < emb; ++i) dpre2[i] = demb[i] * nn::silu_grad(ws.emb_pre2[i]);
  time_fc2_.backward(store_, ws.emb_hidden.data(), dpre2.data(), dhidden.data());
  for (int i = 0; i < emb; ++i) dhidden[i] *= nn::silu_grad(ws.emb_pre1[i]);
  time_fc1_.backward(store_, ws.sinus.data(), dhidden.data(), nullptr);
}

// ---------------------------------------------------------------------------
// Weight archive: "TDWA" | u16 version | u32 header_len | header JSON |
// float32 LE tensors in header order. The header carries the architecture
// descriptor, the tensor table and the training-config hash.

inline constexpr char kArchiveMagic[4] = {'T', 'D', 'W', 'A'};
inline constexpr std::uint16_t kArchiveVersion = 1;

template <typename T>
std::string export_params(const Denoiser<T>& model, const std::string& train_config_hash = "") {
  const auto& ps = model.params();
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : ps.entries) tensors.push_back({{"name", e.name}, {"shape", e.shape}});
  nlohmann::json header = {{"architecture", model.architecture()},
                           {"parameter_count", ps.count()},
                           {"train_config_hash", train_config_hash},
                           {"dtype", "float32"},
                           {"tensors", tensors}};
  std::string hdr = header.dump();
  std::string out(kArchiveMagic, 4);
  detail::put_le(out, kArchiveVersion);
  detail::put_le(out, static_cast<std::uint32_t>(hdr.size()));
  out += hdr;
  out.reserve(out.size() + 4 * ps.count());
  for (T v : ps.values) detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

struct ArchiveHeader {
  Architecture architecture;
  std::string train_config_hash;
  nlohmann::json json;
};

inline ArchiveHeader read_archive_header(const std::string& bytes, std::size_t* payload = nullptr) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 10 || std::memcmp(p, kArchiveMagic, 4) != 0) throw FormatError("not a weight archive");
  auto version = detail::get_le<std::uint16_t>(p + 4);
  if (version != kArchiveVersion) throw FormatError("unsupported weight archive version " + std::to_string(version));
  auto hlen = detail::get_le<std::uint32_t>(p + 6);
  if (bytes.size() < 10 + std::size_t{hlen}) throw FormatError("truncated weight archive header");
  ArchiveHeader h;
  h.json = nlohmann::json::parse(bytes.begin() + 10, bytes.begin() + 10 + hlen);
  h.architecture = h.json.at("architecture").get<Architecture>();
  h.train_config_hash = h.json.value("train_config_hash", std::string());
  if (payload) *payload = 10 + hlen;
  return h;
}

/// Rebuilds a model from an archive. Tensor names and shapes must match the
/// layout implied by the stored architecture.
template <typename T>
Denoiser<T> import_params(const std::string& bytes) {
  std::size_t off = 0;
  ArchiveHeader h = read_archive_header(bytes, &off);
  Denoiser<T> model(h.architecture);
  auto& ps = model.params();
  const auto& tensors = h.json.at("tensors");
  if (tensors.size() != ps.entries.size()) throw FormatError("weight archive tensor count mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].at("name").get<std::string>() != ps.entries[i].name ||
        tensors[i].at("shape").get<std::vector<int>>() != ps.entries[i].shape) {
      throw FormatError("weight archive tensor '" + tensors[i].at("name").get<std::string>() +
                        "' does not match the architecture");
    }
  }
  if (bytes.size() != off + 4 * ps.count()) throw FormatError("weight archive payload size mismatch");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + off;
  for (std::size_t i = 0; i < ps.count(); ++i) {
    ps.values[i] = static_cast<T>(std::bit_cast<float>(detail::get_le<std::uint32_t>(p + 4 * i)));
  }
  return model;
}

/// As import_params, but rejects archives whose architecture differs from `expected`.
template <typename T>
Denoiser<T> import_params(const std::string& bytes, const Architecture& expected) {
  ArchiveHeader h = read_archive_header(bytes);
  if (!(h.architecture == expected)) {
    throw FormatError("weight archive architecture " + nlohmann::json(h.architecture).dump() +
                      " does not match expected " + nlohmann::json(expected).dump());
  }
  return import_params<T>(bytes);
}

}  // namespace trajdiff
