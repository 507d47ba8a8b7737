#pragma once

// Configurable 2D/3D U-Net with basic/residual/dense blocks, optional
// squeeze-and-excitation, a binary softmax head and an appendable
// 4-channel error head that reads the same penultimate feature map.

#include <filesystem>
#include <fstream>
#include <memory>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "maskmine/core.hpp"
#include "maskmine/nn.hpp"

namespace maskmine {

enum class BlockType { basic, residual, dense };

inline const char* to_string(BlockType b) {
  switch (b) {
    case BlockType::basic: return "basic";
    case BlockType::residual: return "residual";
    default: return "dense";
  }
}
inline BlockType block_from_string(const std::string& s) {
  if (s == "basic") return BlockType::basic;
  if (s == "residual") return BlockType::residual;
  if (s == "dense") return BlockType::dense;
  throw ConfigError("unknown block type: " + s);
}

struct ModelConfig {
  int dims = 2;  // 2 or 3
  int depth = 3;
  int64_t base_channels = 16;
  BlockType block = BlockType::basic;
  bool se_enabled = false;
  int64_t in_channels = 3;   // multislice k for 2D, 1 for 3D
  int64_t out_channels = 2;  // binary head
  bool batch_norm = true;

  void validate() const {
    if (dims != 2 && dims != 3) throw ConfigError("ModelConfig: dims must be 2 or 3");
    if (depth < 1 || depth > 8) throw ConfigError("ModelConfig: depth must be in [1, 8]");
    if (base_channels < 1 || in_channels < 1) throw ConfigError("ModelConfig: channels must be >= 1");
    if (out_channels != 2 && out_channels != 4)
      throw ConfigError("ModelConfig: out_channels must be 2 or 4");
  }

  std::array<int64_t, 3> kernel() const {
    return dims == 2 ? std::array<int64_t, 3>{1, 3, 3} : std::array<int64_t, 3>{3, 3, 3};
  }
  std::array<int64_t, 3> pool() const {
    return dims == 2 ? std::array<int64_t, 3>{1, 2, 2} : std::array<int64_t, 3>{2, 2, 2};
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"dims", c.dims},
       {"depth", c.depth},
       {"base_channels", c.base_channels},
       {"block", to_string(c.block)},
       {"se_enabled", c.se_enabled},
       {"in_channels", c.in_channels},
       {"out_channels", c.out_channels},
       {"batch_norm", c.batch_norm}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.dims = j.at("dims").get<int>();
  c.depth = j.at("depth").get<int>();
  c.base_channels = j.at("base_channels").get<int64_t>();
  c.block = block_from_string(j.at("block").get<std::string>());
  c.se_enabled = j.at("se_enabled").get<bool>();
  c.in_channels = j.at("in_channels").get<int64_t>();
  c.out_channels = j.at("out_channels").get<int64_t>();
  c.batch_norm = j.at("batch_norm").get<bool>();
}

namespace detail {

// conv -> (bn) -> relu
class ConvBnRelu {
 public:
  ConvBnRelu(const std::string& name, int64_t in_c, int64_t out_c, std::array<int64_t, 3> kernel,
             bool bn, Rng& rng)
      : conv_(name + ".conv", in_c, out_c, kernel, rng) {
    if (bn) bn_ = std::make_unique<nn::BatchNorm>(name + ".bn", out_c);
  }

  FloatGrid forward(const FloatGrid& x, bool train) {
    FloatGrid y = conv_.forward(x, train);
    if (bn_) y = bn_->forward(y, train);
    return relu_.forward(y, train);
  }
  FloatGrid backward(const FloatGrid& dy) {
    FloatGrid d = relu_.backward(dy);
    if (bn_) d = bn_->backward(d);
    return conv_.backward(d);
  }
  void collect(std::vector<nn::Param*>& out) {
    conv_.collect(out);
    if (bn_) bn_->collect(out);
  }
  void collect_buffers(std::vector<std::pair<std::string, FloatGrid*>>& out,
                       const std::string& name) {
    if (bn_) {
      out.emplace_back(name + ".bn.running_mean", &bn_->running_mean());
      out.emplace_back(name + ".bn.running_var", &bn_->running_var());
    }
  }

 private:
  nn::Conv conv_;
  std::unique_ptr<nn::BatchNorm> bn_;
  nn::Relu relu_;
};

class ConvBlock {
 public:
  ConvBlock(const std::string& name, int64_t in_c, int64_t out_c, const ModelConfig& cfg, Rng& rng)
      : name_(name), type_(cfg.block), in_c_(in_c), out_c_(out_c) {
    auto k = cfg.kernel();
    switch (type_) {
      case BlockType::basic:
        cbr1_ = std::make_unique<ConvBnRelu>(name + ".c1", in_c, out_c, k, cfg.batch_norm, rng);
        cbr2_ = std::make_unique<ConvBnRelu>(name + ".c2", out_c, out_c, k, cfg.batch_norm, rng);
        break;
      case BlockType::residual:
        cbr1_ = std::make_unique<ConvBnRelu>(name + ".c1", in_c, out_c, k, cfg.batch_norm, rng);
        conv2_ = std::make_unique<nn::Conv>(name + ".c2.conv", out_c, out_c, k, rng);
        if (cfg.batch_norm) bn2_ = std::make_unique<nn::BatchNorm>(name + ".c2.bn", out_c);
        if (in_c != out_c)
          proj_ = std::make_unique<nn::Conv>(name + ".proj", in_c, out_c,
                                             std::array<int64_t, 3>{1, 1, 1}, rng);
        break;
      case BlockType::dense:
        cbr1_ = std::make_unique<ConvBnRelu>(name + ".c1", in_c, out_c, k, cfg.batch_norm, rng);
        cbr2_ = std::make_unique<ConvBnRelu>(name + ".c2", in_c + out_c, out_c, k, cfg.batch_norm, rng);
        fuse_ = std::make_unique<ConvBnRelu>(name + ".fuse", in_c + 2 * out_c, out_c,
                                             std::array<int64_t, 3>{1, 1, 1}, cfg.batch_norm, rng);
        break;
    }
    if (cfg.se_enabled) se_ = std::make_unique<nn::SqueezeExcite>(name + ".se", out_c, 4, rng);
  }

  FloatGrid forward(const FloatGrid& x, bool train) {
    FloatGrid y;
    switch (type_) {
      case BlockType::basic:
        y = cbr2_->forward(cbr1_->forward(x, train), train);
        if (se_) y = se_->forward(y, train);
        break;
      case BlockType::residual: {
        FloatGrid path = cbr1_->forward(x, train);
        path = conv2_->forward(path, train);
        if (bn2_) path = bn2_->forward(path, train);
        if (se_) path = se_->forward(path, train);
        FloatGrid skip = proj_ ? proj_->forward(x, train) : x;
        nn::add_inplace(path, skip);
        y = out_relu_.forward(path, train);
        break;
      }
      case BlockType::dense: {
        FloatGrid a = cbr1_->forward(x, train);
        FloatGrid xa = nn::concat_channels(x, a);
        FloatGrid b = cbr2_->forward(xa, train);
        FloatGrid xab = nn::concat_channels(xa, b);
        y = fuse_->forward(xab, train);
        if (se_) y = se_->forward(y, train);
        break;
      }
    }
    return y;
  }

  FloatGrid backward(const FloatGrid& dy) {
    switch (type_) {
      case BlockType::basic: {
        FloatGrid d = se_ ? se_->backward(dy) : dy;
        return cbr1_->backward(cbr2_->backward(d));
      }
      case BlockType::residual: {
        FloatGrid d = out_relu_.backward(dy);
        FloatGrid dx = proj_ ? proj_->backward(d) : d;
        FloatGrid dpath = se_ ? se_->backward(d) : d;
        if (bn2_) dpath = bn2_->backward(dpath);
        dpath = conv2_->backward(dpath);
        nn::add_inplace(dx, cbr1_->backward(dpath));
        return dx;
      }
      case BlockType::dense: {
        FloatGrid d = se_ ? se_->backward(dy) : dy;
        FloatGrid dxab = fuse_->backward(d);
        auto [dxa1, db] = nn::split_channels(dxab, in_c_ + out_c_);
        FloatGrid dxa2 = cbr2_->backward(db);
        nn::add_inplace(dxa1, dxa2);
        auto [dx, da] = nn::split_channels(dxa1, in_c_);
        nn::add_inplace(dx, cbr1_->backward(da));
        return dx;
      }
    }
    throw DomainError("unreachable");
  }

  void collect(std::vector<nn::Param*>& out) {
    if (cbr1_) cbr1_->collect(out);
    if (cbr2_) cbr2_->collect(out);
    if (conv2_) conv2_->collect(out);
    if (bn2_) bn2_->collect(out);
    if (proj_) proj_->collect(out);
    if (fuse_) fuse_->collect(out);
    if (se_) se_->collect(out);
  }
  void collect_buffers(std::vector<std::pair<std::string, FloatGrid*>>& out) {
    if (cbr1_) cbr1_->collect_buffers(out, name_ + ".c1");
    if (cbr2_) cbr2_->collect_buffers(out, name_ + ".c2");
    if (bn2_) {
      out.emplace_back(name_ + ".c2.bn.running_mean", &bn2_->running_mean());
      out.emplace_back(name_ + ".c2.bn.running_var", &bn2_->running_var());
    }
    if (fuse_) fuse_->collect_buffers(out, name_ + ".fuse");
  }

 private:
  std::string name_;
  BlockType type_;
  int64_t in_c_, out_c_;
  std::unique_ptr<ConvBnRelu> cbr1_, cbr2_, fuse_;
  std::unique_ptr<nn::Conv> conv2_, proj_;
  std::unique_ptr<nn::BatchNorm> bn2_;
  std::unique_ptr<nn::SqueezeExcite> se_;
  nn::Relu out_relu_;
};

}  // namespace detail

enum class Head { binary, error };

inline const char* to_string(Head h) { return h == Head::binary ? "binary" : "error"; }

class Model {
 public:
  Model(const ModelConfig& cfg, Rng rng) : cfg_(cfg) {
    cfg_.validate();
    int64_t in_c = cfg_.in_channels;
    for (int i = 0; i < cfg_.depth; ++i) {
      int64_t out_c = cfg_.base_channels << i;
      enc_.push_back(std::make_unique<detail::ConvBlock>("enc" + std::to_string(i), in_c, out_c,
                                                         cfg_, rng));
      pools_.push_back(std::make_unique<nn::MaxPool>(cfg_.pool()));
      in_c = out_c;
    }
    bottleneck_ = std::make_unique<detail::ConvBlock>("bottleneck", in_c,
                                                      cfg_.base_channels << cfg_.depth, cfg_, rng);
    int64_t up_c = cfg_.base_channels << cfg_.depth;
    for (int i = cfg_.depth - 1; i >= 0; --i) {
      int64_t skip_c = cfg_.base_channels << i;
      ups_.push_back(std::make_unique<nn::UpsampleNearest>(cfg_.pool()));
      dec_.push_back(std::make_unique<detail::ConvBlock>("dec" + std::to_string(i),
                                                         up_c + skip_c, skip_c, cfg_, rng));
      up_c = skip_c;
    }
    binary_head_ = std::make_unique<nn::Conv>("head.binary", cfg_.base_channels, 2,
                                              std::array<int64_t, 3>{1, 1, 1}, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  bool has_error_head() const { return error_head_ != nullptr; }
  int64_t feature_channels() const { return cfg_.base_channels; }

  // Appends a kernel-size-1 error head reading the penultimate feature
  // map. All pre-existing parameters are untouched; the binary head is
  // kept (frozen and unused during mining retraining).
  void append_error_head(Rng rng, float init_scale = 1e-2f) {
    if (error_head_) throw ConsistencyError("model already has an error head");
    error_head_ = std::make_unique<nn::Conv>("head.error", cfg_.base_channels, 4,
                                             std::array<int64_t, 3>{1, 1, 1}, rng);
    std::vector<nn::Param*> ps;
    error_head_->collect(ps);
    for (auto& v : ps[0]->value.data) v *= init_scale;
  }

  // x: (n, c, h, w) for 2D or (n, c, d, h, w) for 3D. Returns logits with
  // the head's channel count and the input's spatial shape.
  FloatGrid forward(const FloatGrid& x_in, bool train, Head head = Head::binary) {
    FloatGrid x = to5d(x_in);
    if (x.shape[1] != cfg_.in_channels) throw ShapeError("forward: input channel mismatch");
    check_spatial(x);
    FloatGrid feat = forward_features(x, train);
    last_head_ = head;
    FloatGrid logits = head_layer(head).forward(feat, train);
    return from5d(std::move(logits), x_in.ndim());
  }

  // Gradient of a scalar loss w.r.t. the logits of the last forward pass.
  // Accumulates parameter gradients; returns nothing (input grads unused).
  void backward(const FloatGrid& dlogits_in) {
    FloatGrid dfeat = head_layer(last_head_).backward(to5d(dlogits_in));
    backward_impl(std::move(dfeat));
  }

  // Penultimate feature map for a given input (used by the
  // weight-preservation checks).
  FloatGrid features(const FloatGrid& x_in, bool train = false) {
    FloatGrid x = to5d(x_in);
    check_spatial(x);
    return forward_features(x, train);
  }

  std::vector<nn::Param*> parameters(bool include_heads = true) {
    std::vector<nn::Param*> out;
    for (auto& b : enc_) b->collect(out);
    bottleneck_->collect(out);
    for (auto& b : dec_) b->collect(out);
    if (include_heads) {
      binary_head_->collect(out);
      if (error_head_) error_head_->collect(out);
    }
    return out;
  }

  // Trainable set for mining retraining: everything except the frozen
  // original binary head.
  std::vector<nn::Param*> parameters_for_head(Head head) {
    std::vector<nn::Param*> out;
    for (auto& b : enc_) b->collect(out);
    bottleneck_->collect(out);
    for (auto& b : dec_) b->collect(out);
    if (head == Head::binary) {
      binary_head_->collect(out);
    } else {
      if (!error_head_) throw DependencyError("no error head appended");
      error_head_->collect(out);
    }
    return out;
  }

  std::vector<std::pair<std::string, FloatGrid*>> buffers() {
    std::vector<std::pair<std::string, FloatGrid*>> out;
    for (auto& b : enc_) b->collect_buffers(out);
    bottleneck_->collect_buffers(out);
    for (auto& b : dec_) b->collect_buffers(out);
    return out;
  }

  int64_t parameter_count() {
    int64_t n = 0;
    for (nn::Param* p : parameters()) n += p->numel();
    return n;
  }

 private:
  friend class Checkpoint;

  nn::Conv& head_layer(Head head) {
    if (head == Head::binary) return *binary_head_;
    if (!error_head_) throw DependencyError("no error head appended");
    return *error_head_;
  }

  FloatGrid to5d(const FloatGrid& x) const {
    if (x.ndim() == 5) return x;
    if (x.ndim() == 4 && cfg_.dims == 2) {
      FloatGrid y = x;
      y.shape = {x.shape[0], x.shape[1], 1, x.shape[2], x.shape[3]};
      return y;
    }
    throw ShapeError("forward: expected (n,c,h,w) for 2D or (n,c,d,h,w)");
  }
  static FloatGrid from5d(FloatGrid y, int target_ndim) {
    if (target_ndim == 4)
      y.shape = {y.shape[0], y.shape[1], y.shape[3], y.shape[4]};
    return y;
  }

  void check_spatial(const FloatGrid& x) const {
    auto p = cfg_.pool();
    int64_t div[3] = {1, 1, 1};
    for (int i = 0; i < cfg_.depth; ++i)
      for (int a = 0; a < 3; ++a) div[a] *= p[static_cast<size_t>(a)];
    for (int a = 0; a < 3; ++a) {
      int64_t dim = x.shape[static_cast<size_t>(2 + a)];
      if (dim < div[a] || dim % div[a] != 0)
        throw ConfigError("input spatial dims must be divisible by 2^depth along pooled axes");
    }
  }

  FloatGrid forward_features(const FloatGrid& x, bool train) {
    skips_.clear();
    FloatGrid cur = x;
    for (int i = 0; i < cfg_.depth; ++i) {
      FloatGrid s = enc_[static_cast<size_t>(i)]->forward(cur, train);
      cur = pools_[static_cast<size_t>(i)]->forward(s, train);
      skips_.push_back(std::move(s));
    }
    cur = bottleneck_->forward(cur, train);
    for (int i = cfg_.depth - 1; i >= 0; --i) {
      size_t di = static_cast<size_t>(cfg_.depth - 1 - i);
      FloatGrid up = ups_[di]->forward(cur, train);
      up_channels_[di] = up.shape[1];
      cur = dec_[di]->forward(nn::concat_channels(up, skips_[static_cast<size_t>(i)]), train);
    }
    return cur;
  }

  void backward_impl(FloatGrid d) {
    for (int i = 0; i < cfg_.depth; ++i) {
      size_t di = static_cast<size_t>(cfg_.depth - 1 - i);
      FloatGrid dcat = dec_[di]->backward(d);
      auto [dup, dskip] = nn::split_channels(dcat, up_channels_[di]);
      dskip_pending_[static_cast<size_t>(i)] = std::move(dskip);
      d = ups_[di]->backward(dup);
    }
    d = bottleneck_->backward(d);
    for (int i = cfg_.depth - 1; i >= 0; --i) {
      FloatGrid ds = pools_[static_cast<size_t>(i)]->backward(d);
      nn::add_inplace(ds, dskip_pending_[static_cast<size_t>(i)]);
      d = enc_[static_cast<size_t>(i)]->backward(ds);
    }
  }

  ModelConfig cfg_;
  std::vector<std::unique_ptr<detail::ConvBlock>> enc_, dec_;
  std::unique_ptr<detail::ConvBlock> bottleneck_;
  std::vector<std::unique_ptr<nn::MaxPool>> pools_;
  std::vector<std::unique_ptr<nn::UpsampleNearest>> ups_;
  std::unique_ptr<nn::Conv> binary_head_, error_head_;
  std::vector<FloatGrid> skips_;
  std::array<int64_t, 8> up_channels_{};
  std::array<FloatGrid, 8> dskip_pending_{};
  Head last_head_ = Head::binary;
};

// ---------------------------------------------------------------------------
// Checkpoint container: 8-byte magic, u64 JSON header length, JSON header
// (config + head descriptor + tensor manifest), then float32 blobs in
// manifest order.

class Checkpoint {
 public:
  static void save(Model& m, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + path.string());

    nlohmann::json header;
    header["config"] = m.config();
    header["head"] = m.has_error_head() ? "error" : "binary";
    nlohmann::json manifest = nlohmann::json::array();
    std::vector<const FloatGrid*> blobs;
    for (nn::Param* p : m.parameters()) {
      manifest.push_back({{"name", p->name}, {"shape", p->value.shape}});
      blobs.push_back(&p->value);
    }
    for (auto& [name, buf] : m.buffers()) {
      manifest.push_back({{"name", name}, {"shape", buf->shape}});
      blobs.push_back(buf);
    }
    header["tensors"] = manifest;
    std::string hs = header.dump();

    f.write("MMCKPT01", 8);
    uint64_t len = hs.size();
    f.write(reinterpret_cast<const char*>(&len), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const FloatGrid* b : blobs)
      f.write(reinterpret_cast<const char*>(b->ptr()),
              static_cast<std::streamsize>(b->data.size() * sizeof(float)));
    if (!f) throw IoError("short write to checkpoint " + path.string());
  }

  static Head peek_head(const std::filesystem::path& path) {
    nlohmann::json header = read_header(path);
    return header.at("head").get<std::string>() == "error" ? Head::error : Head::binary;
  }
  static ModelConfig peek_config(const std::filesystem::path& path) {
    return read_header(path).at("config").get<ModelConfig>();
  }

  static Model load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read checkpoint " + path.string());
    nlohmann::json header = read_header_stream(f);

    ModelConfig cfg = header.at("config").get<ModelConfig>();
    Model m(cfg, Rng(0));
    if (header.at("head").get<std::string>() == "error") m.append_error_head(Rng(0));

    std::unordered_map<std::string, FloatGrid*> by_name;
    for (nn::Param* p : m.parameters()) by_name[p->name] = &p->value;
    for (auto& [name, buf] : m.buffers()) by_name[name] = buf;

    for (const auto& t : header.at("tensors")) {
      std::string name = t.at("name").get<std::string>();
      std::vector<int64_t> shape = t.at("shape").get<std::vector<int64_t>>();
      auto it = by_name.find(name);
      if (it == by_name.end()) throw ConsistencyError("checkpoint tensor not in model: " + name);
      if (it->second->shape != shape)
        throw ConsistencyError("checkpoint tensor shape mismatch: " + name);
      f.read(reinterpret_cast<char*>(it->second->ptr()),
             static_cast<std::streamsize>(it->second->data.size() * sizeof(float)));
      if (!f) throw FormatError("truncated checkpoint " + path.string());
    }
    return m;
  }

  // Load into a caller-provided architecture; throws ConsistencyError if
  // the stored config or head does not match.
  static void load_into(Model& m, const std::filesystem::path& path) {
    nlohmann::json header = read_header(path);
    ModelConfig stored = header.at("config").get<ModelConfig>();
    nlohmann::json a, b;
    to_json(a, stored);
    to_json(b, m.config());
    if (a != b) throw ConsistencyError("checkpoint config does not match model architecture");
    bool stored_err = header.at("head").get<std::string>() == "error";
    if (stored_err != m.has_error_head())
      throw ConsistencyError("checkpoint head descriptor does not match model");
    Model tmp = load(path);
    auto src = tmp.parameters();
    auto dst = m.parameters();
    for (size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
    auto sb = tmp.buffers();
    auto db = m.buffers();
    for (size_t i = 0; i < sb.size(); ++i) *db[i].second = *sb[i].second;
  }

 private:
  static nlohmann::json read_header(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read checkpoint " + path.string());
    return read_header_stream(f);
  }
  static nlohmann::json read_header_stream(std::ifstream& f) {
    char magic[8];
    f.read(magic, 8);
    if (!f || std::string(magic, 8) != "MMCKPT01") throw FormatError("not a checkpoint file");
    uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 8);
    std::string hs(len, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(len));
    if (!f) throw FormatError("truncated checkpoint header");
    return nlohmann::json::parse(hs);
  }
};

}  // namespace maskmine
