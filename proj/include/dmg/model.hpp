// Dual-encoder attention U-Net for pre/post-event tile pairs. Two identical
// encoder stacks (one per epoch) feed per-level fusion convolutions; the
// decoder upsamples from the pooled deepest fusion, gating each fused skip
// with an attention block before concatenation.
#pragma once

#include <nlohmann/json.hpp>

#include "dmg/checkpoint.hpp"
#include "dmg/ops.hpp"
#include "dmg/optim.hpp"

namespace dmg {

// Channel layout per modality scenario. Stacks follow [R, G, B, SAR] order;
// scenarios that drop a sensor drop its channels.
struct ModalityMode {
  int id = 2;
  int pre_channels = 3;
  int post_channels = 3;

  static ModalityMode from_id(int id) {
    switch (id) {
      case 1: return {1, 4, 4};  // optical + SAR, both epochs
      case 2: return {2, 3, 3};  // optical only
      case 3: return {3, 1, 1};  // SAR only
      case 4: return {4, 3, 1};  // optical pre, SAR post
      case 5: return {5, 4, 1};  // optical + SAR pre, SAR post
      default: fail_validation("modality mode must be 1..5, got " + std::to_string(id));
    }
  }
};

struct ModelConfig {
  int mode = 2;
  int base_width = 16;
  int depth = 5;
  int n_classes = 4;
  bool attention = true;

  nlohmann::json to_json() const {
    return {{"mode", mode},
            {"base_width", base_width},
            {"depth", depth},
            {"n_classes", n_classes},
            {"attention", attention}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.mode = j.at("mode").get<int>();
    c.base_width = j.at("base_width").get<int>();
    c.depth = j.at("depth").get<int>();
    c.n_classes = j.at("n_classes").get<int>();
    c.attention = j.at("attention").get<bool>();
    return c;
  }
  void validate() const {
    ModalityMode::from_id(mode);
    require(base_width >= 2 && base_width % 2 == 0,
            "base_width must be an even value >= 2, got " + std::to_string(base_width));
    require(depth >= 1 && depth <= 6, "depth must be in 1..6, got " + std::to_string(depth));
    require(n_classes >= 2, "n_classes must be >= 2");
  }
};

namespace nn {

template <class T>
struct BnStateRef {
  std::string name;
  std::vector<T>* mean;
  std::vector<T>* var;
};

template <class T>
struct Conv2d {
  Parameter<T> w, b;
  bool use_bias = true;
  Tensor<T> zero_b;  // stands in for the bias when use_bias is off

  void build(const std::string& name, int64_t cout, int64_t cin, int64_t k, Rng& rng,
             bool with_bias = true) {
    use_bias = with_bias;
    double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
    w.init(name + ".w", Tensor<T>::randn(Shape4{cout, cin, k, k}, rng, stddev));
    if (use_bias) {
      b.init(name + ".b", Tensor<T>(Shape4{1, cout, 1, 1}));
    } else {
      zero_b = Tensor<T>(Shape4{1, cout, 1, 1});
    }
  }
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    return conv2d(tape, x, w.value, use_bias ? b.value : zero_b);
  }
  void collect(std::vector<Parameter<T>*>& ps, std::vector<BnStateRef<T>>*) {
    ps.push_back(&w);
    if (use_bias) ps.push_back(&b);
  }
};

template <class T>
struct UpConv2d {
  Parameter<T> w, b;

  void build(const std::string& name, int64_t cin, int64_t cout, Rng& rng) {
    double stddev = std::sqrt(2.0 / static_cast<double>(cin * 16));
    w.init(name + ".w", Tensor<T>::randn(Shape4{cin, cout, 4, 4}, rng, stddev));
    b.init(name + ".b", Tensor<T>(Shape4{1, cout, 1, 1}));
  }
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    return transpose_conv2d(tape, x, w.value, b.value);
  }
  void collect(std::vector<Parameter<T>*>& ps, std::vector<BnStateRef<T>>*) {
    ps.push_back(&w);
    ps.push_back(&b);
  }
};

template <class T>
struct BatchNorm2d {
  std::string name;
  Parameter<T> gamma, beta;
  std::vector<T> run_mean, run_var;

  void build(const std::string& n, int64_t c, Rng&) {
    name = n;
    gamma.init(n + ".gamma", Tensor<T>(Shape4{1, c, 1, 1}, T(1)));
    beta.init(n + ".beta", Tensor<T>(Shape4{1, c, 1, 1}));
    run_mean.assign(static_cast<size_t>(c), T(0));
    run_var.assign(static_cast<size_t>(c), T(1));
  }
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, bool train) {
    return batch_norm(tape, x, gamma.value, beta.value, run_mean, run_var, train);
  }
  void collect(std::vector<Parameter<T>*>& ps, std::vector<BnStateRef<T>>* stats) {
    ps.push_back(&gamma);
    ps.push_back(&beta);
    if (stats) stats->push_back({name, &run_mean, &run_var});
  }
};

// Two rounds of 3x3 conv + batch norm + ReLU.
template <class T>
struct ConvBlock {
  Conv2d<T> c1, c2;
  BatchNorm2d<T> n1, n2;

  void build(const std::string& name, int64_t cin, int64_t cout, Rng& rng) {
    c1.build(name + ".conv1", cout, cin, 3, rng);
    n1.build(name + ".bn1", cout, rng);
    c2.build(name + ".conv2", cout, cout, 3, rng);
    n2.build(name + ".bn2", cout, rng);
  }
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, bool train) {
    Tensor<T> y = relu(tape, n1.forward(tape, c1.forward(tape, x), train));
    return relu(tape, n2.forward(tape, c2.forward(tape, y), train));
  }
  void collect(std::vector<Parameter<T>*>& ps, std::vector<BnStateRef<T>>* st) {
    c1.collect(ps, st);
    n1.collect(ps, st);
    c2.collect(ps, st);
    n2.collect(ps, st);
  }
};

// Skip fusion: concatenated pre/post features (2C) squeeze back to C.
template <class T>
struct FuseConv {
  Conv2d<T> c;
  BatchNorm2d<T> n;

  void build(const std::string& name, int64_t c_out, Rng& rng) {
    c.build(name + ".conv", c_out, 2 * c_out, 3, rng);
    n.build(name + ".bn", c_out, rng);
  }
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& pre_feat, const Tensor<T>& post_feat,
                    bool train) {
    Tensor<T> cat = concat_channels(tape, pre_feat, post_feat);
    return relu(tape, n.forward(tape, c.forward(tape, cat), train));
  }
  void collect(std::vector<Parameter<T>*>& ps, std::vector<BnStateRef<T>>* st) {
    c.collect(ps, st);
    n.collect(ps, st);
  }
};

// Additive attention gate: alpha = sigmoid(psi(ReLU(Wg*g + Wx*x + b))),
// then the skip is scaled per pixel by alpha. Projections are 1x1 at half
// the skip width.
template <class T>
struct AttentionGate {
  Conv2d<T> wg, wx, psi;

  void build(const std::string& name, int64_t c, Rng& rng) {
    int64_t inter = std::max<int64_t>(1, c / 2);
    wg.build(name + ".wg", inter, c, 1, rng, true);
    wx.build(name + ".wx", inter, c, 1, rng, false);
    psi.build(name + ".psi", 1, inter, 1, rng, true);
  }
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& skip, const Tensor<T>& gate) {
    require(skip.shape() == gate.shape(),
            "attention gate: skip " + skip.shape().str() + " and gate " + gate.shape().str() +
                " must match");
    Tensor<T> a = add(tape, wg.forward(tape, gate), wx.forward(tape, skip));
    Tensor<T> alpha = sigmoid(tape, psi.forward(tape, relu(tape, a)));
    return mul(tape, skip, alpha);
  }
  void collect(std::vector<Parameter<T>*>& ps, std::vector<BnStateRef<T>>* st) {
    wg.collect(ps, st);
    wx.collect(ps, st);
    psi.collect(ps, st);
  }
};

}  // namespace nn

template <class T>
struct Prediction {
  std::vector<uint8_t> classes;  // (B, H, W) row-major argmax map
  Tensor<T> probs;               // (B, n_classes, H, W) softmax output
};

template <class T>
class DualEncoderUNet {
public:
  DualEncoderUNet(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg), mode_(ModalityMode::from_id(cfg.mode)) {
    cfg_.validate();
    Rng rng = Rng(seed).fork("model-init");
    int d = cfg_.depth;
    enc_pre_.resize(d);
    enc_post_.resize(d);
    fuse_.resize(d);
    up_.resize(d);
    gate_.resize(d);
    dec_.resize(d);
    for (int l = 0; l < d; ++l) {
      int64_t c = width_at(l);
      int64_t cin_pre = l == 0 ? mode_.pre_channels : width_at(l - 1);
      int64_t cin_post = l == 0 ? mode_.post_channels : width_at(l - 1);
      enc_pre_[l].build("enc_pre." + std::to_string(l), cin_pre, c, rng);
      enc_post_[l].build("enc_post." + std::to_string(l), cin_post, c, rng);
      fuse_[l].build("fuse." + std::to_string(l), c, rng);
    }
    for (int l = 0; l < d; ++l) {
      int64_t c = width_at(l);
      int64_t up_in = (l == d - 1) ? c : 2 * c;
      up_[l].build("up." + std::to_string(l), up_in, c, rng);
      gate_[l].build("gate." + std::to_string(l), c, rng);
      dec_[l].build("dec." + std::to_string(l), 2 * c, c, rng);
    }
    head_.build("head", cfg_.n_classes, width_at(0), 1, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const ModalityMode& mode() const { return mode_; }

  Tensor<T> fuse_skip(Tape<T>* tape, const Tensor<T>& pre_feat, const Tensor<T>& post_feat,
                      int level, bool train) {
    return fuse_[level].forward(tape, pre_feat, post_feat, train);
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& pre, const Tensor<T>& post, bool train) {
    const Shape4& ps = pre.shape();
    const Shape4& qs = post.shape();
    require(ps.c == mode_.pre_channels,
            "forward: mode " + std::to_string(mode_.id) + " expects " +
                std::to_string(mode_.pre_channels) + " pre channels, got " + ps.str());
    require(qs.c == mode_.post_channels,
            "forward: mode " + std::to_string(mode_.id) + " expects " +
                std::to_string(mode_.post_channels) + " post channels, got " + qs.str());
    require(ps.b == qs.b && ps.h == qs.h && ps.w == qs.w,
            "forward: pre " + ps.str() + " and post " + qs.str() + " disagree");
    int64_t div = int64_t(1) << cfg_.depth;
    require(ps.h % div == 0 && ps.w % div == 0,
            "forward: spatial dims must be divisible by " + std::to_string(div) + ", got " +
                ps.str());

    Tensor<T> xp = pre, xq = post;
    std::vector<Tensor<T>> fused(static_cast<size_t>(cfg_.depth));
    for (int l = 0; l < cfg_.depth; ++l) {
      Tensor<T> fp = enc_pre_[l].forward(tape, xp, train);
      Tensor<T> fq = enc_post_[l].forward(tape, xq, train);
      fused[l] = fuse_[l].forward(tape, fp, fq, train);
      xp = maxpool2x2(tape, fp);
      xq = maxpool2x2(tape, fq);
    }
    Tensor<T> d = maxpool2x2(tape, fused[static_cast<size_t>(cfg_.depth - 1)]);
    for (int l = cfg_.depth - 1; l >= 0; --l) {
      Tensor<T> u = up_[l].forward(tape, d);
      Tensor<T> skip = fused[static_cast<size_t>(l)];
      Tensor<T> a = cfg_.attention ? gate_[l].forward(tape, skip, u) : skip;
      d = dec_[l].forward(tape, concat_channels(tape, u, a), train);
    }
    return head_.forward(tape, d);
  }

  // Eval-mode probabilities and argmax map. Ties take the lowest class index.
  Prediction<T> predict(const Tensor<T>& pre, const Tensor<T>& post) {
    Tensor<T> logits = forward(nullptr, pre, post, false);
    Tensor<T> probs = softmax_channels<T>(nullptr, logits);
    Prediction<T> out;
    out.probs = probs;
    out.classes = argmax_channels(probs);
    return out;
  }

  static std::vector<uint8_t> argmax_channels(const Tensor<T>& probs) {
    const Shape4& s = probs.shape();
    std::vector<uint8_t> cls(static_cast<size_t>(s.b * s.h * s.w));
    const T* p = probs.data();
    int64_t plane = s.plane();
    for (int64_t bi = 0; bi < s.b; ++bi) {
      const T* base = p + bi * s.c * plane;
      for (int64_t i = 0; i < plane; ++i) {
        int best = 0;
        T bv = base[i];
        for (int64_t c = 1; c < s.c; ++c) {
          T v = base[c * plane + i];
          if (v > bv) {
            bv = v;
            best = static_cast<int>(c);
          }
        }
        cls[static_cast<size_t>(bi * plane + i)] = static_cast<uint8_t>(best);
      }
    }
    return cls;
  }

  std::vector<Parameter<T>*> params() {
    std::vector<Parameter<T>*> ps;
    walk(&ps, nullptr);
    return ps;
  }

  std::vector<nn::BnStateRef<T>> bn_state() {
    std::vector<Parameter<T>*> ps;
    std::vector<nn::BnStateRef<T>> st;
    walk(&ps, &st);
    return st;
  }

  int64_t param_count() {
    int64_t n = 0;
    for (auto* p : params()) n += p->value.numel();
    return n;
  }

  void save(const std::filesystem::path& path, nlohmann::json extra_meta = {}) {
    Checkpoint ck;
    ck.meta["model"] = cfg_.to_json();
    if (!extra_meta.is_null()) {
      for (auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
    }
    for (auto* p : params()) ck.add(p->name, p->value);
    for (auto& st : bn_state()) {
      int64_t c = static_cast<int64_t>(st.mean->size());
      std::vector<float> tmp(st.mean->size());
      for (size_t i = 0; i < tmp.size(); ++i) tmp[i] = static_cast<float>((*st.mean)[i]);
      ck.add(st.name + ".running_mean", Shape4{1, c, 1, 1}, tmp.data());
      for (size_t i = 0; i < tmp.size(); ++i) tmp[i] = static_cast<float>((*st.var)[i]);
      ck.add(st.name + ".running_var", Shape4{1, c, 1, 1}, tmp.data());
    }
    ck.save(path);
  }

  static DualEncoderUNet<T> load(const std::filesystem::path& path) {
    Checkpoint ck = Checkpoint::load(path);
    require(ck.meta.contains("model"), "checkpoint missing model configuration");
    ModelConfig cfg = ModelConfig::from_json(ck.meta.at("model"));
    DualEncoderUNet<T> model(cfg, 0);
    for (auto* p : model.params()) {
      const CheckpointEntry& e = ck.at(p->name);
      require_shape(e.shape, p->value.shape(), p->name.c_str());
      for (int64_t i = 0; i < p->value.numel(); ++i) {
        p->value.data()[i] = static_cast<T>(e.values[static_cast<size_t>(i)]);
      }
    }
    for (auto& st : model.bn_state()) {
      const CheckpointEntry& em = ck.at(st.name + ".running_mean");
      const CheckpointEntry& ev = ck.at(st.name + ".running_var");
      require(em.values.size() == st.mean->size() && ev.values.size() == st.var->size(),
              "checkpoint: running stat size mismatch at " + st.name);
      for (size_t i = 0; i < st.mean->size(); ++i) {
        (*st.mean)[i] = static_cast<T>(em.values[i]);
        (*st.var)[i] = static_cast<T>(ev.values[i]);
      }
    }
    model.loaded_meta_ = ck.meta;
    return model;
  }

  const nlohmann::json& loaded_meta() const { return loaded_meta_; }

private:
  int64_t width_at(int level) const { return static_cast<int64_t>(cfg_.base_width) << level; }

  void walk(std::vector<Parameter<T>*>* ps, std::vector<nn::BnStateRef<T>>* st) {
    for (auto& b : enc_pre_) b.collect(*ps, st);
    for (auto& b : enc_post_) b.collect(*ps, st);
    for (auto& f : fuse_) f.collect(*ps, st);
    for (auto& u : up_) u.collect(*ps, st);
    for (auto& g : gate_) g.collect(*ps, st);
    for (auto& d : dec_) d.collect(*ps, st);
    head_.collect(*ps, st);
  }

  ModelConfig cfg_;
  ModalityMode mode_;
  nlohmann::json loaded_meta_;
  std::vector<nn::ConvBlock<T>> enc_pre_, enc_post_, dec_;
  std::vector<nn::FuseConv<T>> fuse_;
  std::vector<nn::UpConv2d<T>> up_;
  std::vector<nn::AttentionGate<T>> gate_;
  nn::Conv2d<T> head_;
};

}  // namespace dmg
