#pragma once

// Multi-scale convolutional feature extractor.  A strided stem and three
// residual stages reach strides 8/16/32; a top-down pyramid plus two extra
// strided convolutions extend that to five levels of stride 8, 16, 32, 64,
// and 128, all carrying the same channel count.

#include <stdexcept>
#include <string>
#include <vector>

#include "bevnet/ops.hpp"
#include "bevnet/optim.hpp"
#include "bevnet/random.hpp"
#include "bevnet/tensor.hpp"

namespace bevnet {

struct BackboneConfig {
  int base_width = 32;    // stage widths are base, 2*base, 4*base
  int fpn_channels = 64;  // channel count shared by all pyramid levels
};

template <typename S>
struct FeaturePyramid {
  std::vector<int> strides;       // {8, 16, 32, 64, 128}
  std::vector<Tensor<S>> levels;  // levels[i] is [C, H/strides[i], W/strides[i]]
};

template <typename S>
class Backbone {
 public:
  Backbone(ParamStore<S>& ps, const BackboneConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    size_t before = ps.total_scalars();
    int b = cfg.base_width;
    int c = cfg.fpn_channels;
    stem1_ = make_conv(ps, rng, "backbone.stem1", 3, b / 2, 3, 2, true);
    stem2_ = make_conv(ps, rng, "backbone.stem2", b / 2, b, 3, 2, true);
    int widths[3] = {b, 2 * b, 4 * b};
    int in_w = b;
    for (int s = 0; s < 3; ++s) {
      std::string base = "backbone.stage" + std::to_string(s + 1);
      down_[s] = make_conv(ps, rng, base + ".down", in_w, widths[s], 3, 2, true);
      for (int r = 0; r < 2; ++r) {
        std::string bb = base + ".block" + std::to_string(r + 1);
        blocks_[s][r][0] = make_conv(ps, rng, bb + ".a", widths[s], widths[s], 3, 1, true);
        blocks_[s][r][1] = make_conv(ps, rng, bb + ".b", widths[s], widths[s], 3, 1, true);
      }
      in_w = widths[s];
    }
    for (int s = 0; s < 3; ++s) {
      lateral_[s] = make_conv(ps, rng, "backbone.lateral" + std::to_string(s + 1),
                              widths[s], c, 1, 1);
      smooth_[s] = make_conv(ps, rng, "backbone.smooth" + std::to_string(s + 1),
                             c, c, 3, 1);
    }
    extra_[0] = make_conv(ps, rng, "backbone.extra1", c, c, 3, 2);
    extra_[1] = make_conv(ps, rng, "backbone.extra2", c, c, 3, 2);
    param_count_ = ps.total_scalars() - before;
  }

  // image is [3,H,W] with H and W divisible by 128 (the deepest stride).
  FeaturePyramid<S> extract(const Tensor<S>& image) const {
    if (image.rank() != 3 || image.dim(0) != 3)
      throw std::invalid_argument("backbone: image must be [3,H,W], got " +
                                  shape_str(image.shape()));
    int h = image.dim(1), w = image.dim(2);
    if (h % 128 != 0 || w % 128 != 0)
      throw std::invalid_argument(
          "backbone: image size " + std::to_string(h) + "x" + std::to_string(w) +
          " must be divisible by 128");
    Tensor<S> x = unit(stem1_, image);
    x = unit(stem2_, x);
    std::vector<Tensor<S>> stage_out;
    for (int s = 0; s < 3; ++s) {
      x = unit(down_[s], x);
      for (int r = 0; r < 2; ++r) {
        Tensor<S> y = unit(blocks_[s][r][0], x);
        y = norm(blocks_[s][r][1], conv2d(y, blocks_[s][r][1].w, &blocks_[s][r][1].b, 1, 1));
        x = relu(add(x, y));
      }
      stage_out.push_back(x);
    }
    Tensor<S> p5 = conv1(lateral_[2], stage_out[2]);
    Tensor<S> p4 = add(conv1(lateral_[1], stage_out[1]), upsample2x(p5));
    Tensor<S> p3 = add(conv1(lateral_[0], stage_out[0]), upsample2x(p4));
    p3 = conv2d(p3, smooth_[0].w, &smooth_[0].b, 1, 1);
    p4 = conv2d(p4, smooth_[1].w, &smooth_[1].b, 1, 1);
    p5 = conv2d(p5, smooth_[2].w, &smooth_[2].b, 1, 1);
    Tensor<S> p6 = conv2d(p5, extra_[0].w, &extra_[0].b, 2, 1);
    Tensor<S> p7 = conv2d(relu(p6), extra_[1].w, &extra_[1].b, 2, 1);
    FeaturePyramid<S> pyr;
    pyr.strides = {8, 16, 32, 64, 128};
    pyr.levels = {p3, p4, p5, p6, p7};
    return pyr;
  }

  int channels() const { return cfg_.fpn_channels; }
  size_t parameter_count() const { return param_count_; }

 private:
  struct ConvP {
    Tensor<S> w, b, gamma, beta;
    int stride = 1, pad = 0;
    bool has_norm = false;
  };

  static ConvP make_conv(ParamStore<S>& ps, Rng& rng, const std::string& name,
                         int cin, int cout, int k, int stride,
                         bool normed = false) {
    ConvP c;
    c.w = ps.create_random(name + ".w", {cout, cin, k, k}, rng);
    c.b = ps.create_fill(name + ".b", {cout}, S(0));
    c.stride = stride;
    c.pad = k / 2;
    if (normed) {
      c.gamma = ps.create_fill(name + ".g", {cout}, S(1));
      c.beta = ps.create_fill(name + ".beta", {cout}, S(0));
      c.has_norm = true;
    }
    return c;
  }

  Tensor<S> norm(const ConvP& c, const Tensor<S>& x) const {
    return c.has_norm ? instance_norm(x, c.gamma, c.beta) : x;
  }
  Tensor<S> unit(const ConvP& c, const Tensor<S>& x) const {
    return relu(norm(c, conv2d(x, c.w, &c.b, c.stride, c.pad)));
  }
  Tensor<S> conv1(const ConvP& c, const Tensor<S>& x) const {
    return conv2d(x, c.w, &c.b, 1, 0);
  }

  BackboneConfig cfg_;
  ConvP stem1_, stem2_;
  ConvP down_[3];
  ConvP blocks_[3][2][2];
  ConvP lateral_[3], smooth_[3], extra_[2];
  size_t param_count_ = 0;
};

}  // namespace bevnet
