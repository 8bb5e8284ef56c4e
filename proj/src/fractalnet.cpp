#include "fieldkit/fractalnet.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "fieldkit/loss.hpp"

namespace fieldkit::net {

void NetworkSpec::validate() const {
  if (depth < 1) throw InvalidArgument("network depth must be >= 1");
  if (depth > 10) throw InvalidArgument("network depth must be <= 10");
  if (base_filters < 1) throw InvalidArgument("base_filters must be >= 1");
  if (in_channels < 1) throw InvalidArgument("in_channels must be >= 1");
  if (attention_depth < 0 || attention_depth > 30) throw InvalidArgument("attention_depth must be in [0, 30]");
  if (norm_groups < 1) throw InvalidArgument("norm_groups must be >= 1");
}

Json spec_to_json(const NetworkSpec& s) {
  Json j;
  j["depth"] = s.depth;
  j["base_filters"] = s.base_filters;
  j["in_channels"] = s.in_channels;
  j["attention"] = s.attention;
  j["attention_depth"] = s.attention_depth;
  j["separate_heads"] = s.separate_heads;
  j["norm_groups"] = s.norm_groups;
  return j;
}

NetworkSpec spec_from_json(const Json& j) {
  NetworkSpec s;
  try {
    s.depth = j.value("depth", s.depth);
    s.base_filters = j.value("base_filters", s.base_filters);
    s.in_channels = j.value("in_channels", s.in_channels);
    s.attention = j.value("attention", s.attention);
    s.attention_depth = j.value("attention_depth", s.attention_depth);
    s.separate_heads = j.value("separate_heads", s.separate_heads);
    s.norm_groups = j.value("norm_groups", s.norm_groups);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad network spec: ") + e.what());
  }
  s.validate();
  return s;
}

template <typename T>
Tensor<T> tensor_from_raster(const FloatRaster& r) {
  Tensor<T> t(r.channels, r.height(), r.width());
  std::transform(r.data.begin(), r.data.end(), t.data.begin(), [](float v) { return static_cast<T>(v); });
  return t;
}

template Tensor<float> tensor_from_raster<float>(const FloatRaster&);
template Tensor<double> tensor_from_raster<double>(const FloatRaster&);

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using MapCM = Eigen::Map<const Mat<T>>;

template <typename T>
struct Store {
  std::vector<Parameter<T>> params;

  std::size_t add(const std::string& name, std::vector<int> shape, bool unit = false) {
    Parameter<T> p;
    p.name = name;
    p.shape = std::move(shape);
    std::size_t n = 1;
    for (int s : p.shape) n *= static_cast<std::size_t>(s);
    p.value.assign(n, T(0));
    p.grad.assign(n, T(0));
    p.unit_interval = unit;
    params.push_back(std::move(p));
    return params.size() - 1;
  }
  Parameter<T>& operator[](std::size_t i) { return params[i]; }
};

template <typename T>
void init_normal(Parameter<T>& p, std::uint64_t seed, double sd) {
  Rng rng(derive_seed(seed, p.name));
  for (auto& v : p.value) v = static_cast<T>(sd * rng.normal());
}

template <typename T>
void init_const(Parameter<T>& p, double v) {
  std::fill(p.value.begin(), p.value.end(), static_cast<T>(v));
}

// ---------------------------------------------------------------------------
// Layers. Each keeps the values it needs for its own backward pass.

template <typename T>
struct Conv {
  int in = 0, out = 0, k = 1, stride = 1, pad = 0;
  bool has_bias = true;
  std::size_t w = 0, b = 0;
  // Cache
  int ih = 0, iw = 0, oh = 0, ow = 0;
  AlignedVector<T> col;
  Tensor<T> input;  // 1x1 convs use the input as their column matrix

  Conv() = default;
  Conv(Store<T>& st, const std::string& name, int in_, int out_, int k_, int stride_, std::uint64_t seed,
       double gain = 2.0, bool bias = true)
      : in(in_), out(out_), k(k_), stride(stride_), pad(stride_ == 1 ? k_ / 2 : 0), has_bias(bias) {
    w = st.add(name + ".w", {out, in, k, k});
    if (has_bias) b = st.add(name + ".b", {out});
    init_normal(st[w], seed, std::sqrt(gain / (in * k * k)));
  }

  bool pointwise() const { return k == 1 && stride == 1; }

  void im2col(const Tensor<T>& x) {
    const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
    col.assign(static_cast<std::size_t>(in) * k * k * ohw, T(0));
    for (int ci = 0; ci < in; ++ci) {
      const T* src = x.channel(ci);
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          T* row = col.data() + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * ohw;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= ih) continue;
            T* dst = row + static_cast<std::size_t>(oy) * ow;
            const T* s = src + static_cast<std::size_t>(iy) * iw;
            if (stride == 1) {
              const int x0 = std::max(0, pad - kx), x1 = std::min(ow, iw + pad - kx);
              for (int ox = x0; ox < x1; ++ox) dst[ox] = s[ox + kx - pad];
            } else {
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * stride + kx - pad;
                if (ix >= 0 && ix < iw) dst[ox] = s[ix];
              }
            }
          }
        }
    }
  }

  Tensor<T> col2im(const AlignedVector<T>& dcol) const {
    Tensor<T> dx(in, ih, iw);
    const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
    for (int ci = 0; ci < in; ++ci) {
      T* dst = dx.channel(ci);
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const T* row = dcol.data() + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * ohw;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= ih) continue;
            const T* s = row + static_cast<std::size_t>(oy) * ow;
            T* d = dst + static_cast<std::size_t>(iy) * iw;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < iw) d[ix] += s[ox];
            }
          }
        }
    }
    return dx;
  }

  Tensor<T> forward(Store<T>& st, const Tensor<T>& x, bool train) {
    if (x.c != in) throw ShapeError("convolution expects " + std::to_string(in) + " channels, got " + std::to_string(x.c));
    ih = x.h;
    iw = x.w;
    oh = (ih + 2 * pad - k) / stride + 1;
    ow = (iw + 2 * pad - k) / stride + 1;
    const auto ohw = static_cast<Eigen::Index>(oh) * ow;
    Tensor<T> y(out, oh, ow);
    MapCM<T> W(st[w].value.data(), out, static_cast<Eigen::Index>(in) * k * k);
    MapM<T> Y(y.data.data(), out, ohw);
    if (pointwise()) {
      MapCM<T> X(x.data.data(), in, ohw);
      Y.noalias() = W * X;
      if (train) input = x;
    } else {
      im2col(x);
      MapCM<T> C(col.data(), static_cast<Eigen::Index>(in) * k * k, ohw);
      Y.noalias() = W * C;
      if (!train) {
        col.clear();
        col.shrink_to_fit();
      }
    }
    if (has_bias) {
      const auto& bias = st[b].value;
      for (int o = 0; o < out; ++o) Y.row(o).array() += bias[static_cast<std::size_t>(o)];
    }
    return y;
  }

  Tensor<T> backward(Store<T>& st, const Tensor<T>& dy) {
    const auto ohw = static_cast<Eigen::Index>(oh) * ow;
    const auto kk = static_cast<Eigen::Index>(in) * k * k;
    MapCM<T> dY(dy.data.data(), out, ohw);
    MapM<T> dW(st[w].grad.data(), out, kk);
    MapCM<T> W(st[w].value.data(), out, kk);
    if (has_bias) {
      auto& db = st[b].grad;
      for (int o = 0; o < out; ++o) {
        const T* row = dy.channel(o);
        T s = 0;
        for (Eigen::Index i = 0; i < ohw; ++i) s += row[i];
        db[static_cast<std::size_t>(o)] += s;
      }
    }
    if (pointwise()) {
      MapCM<T> X(input.data.data(), in, ohw);
      dW.noalias() += dY * X.transpose();
      Tensor<T> dx(in, ih, iw);
      MapM<T>(dx.data.data(), in, ohw).noalias() = W.transpose() * dY;
      return dx;
    }
    MapCM<T> C(col.data(), kk, ohw);
    dW.noalias() += dY * C.transpose();
    AlignedVector<T> dcol(static_cast<std::size_t>(kk * ohw));
    MapM<T>(dcol.data(), kk, ohw).noalias() = W.transpose() * dY;
    return col2im(dcol);
  }
};

/// 2x2 stride-2 transposed convolution.
template <typename T>
struct UpConv {
  int in = 0, out = 0;
  std::size_t w = 0, b = 0;
  Tensor<T> input;

  UpConv() = default;
  UpConv(Store<T>& st, const std::string& name, int in_, int out_, std::uint64_t seed) : in(in_), out(out_) {
    w = st.add(name + ".w", {in, out, 2, 2});
    b = st.add(name + ".b", {out});
    init_normal(st[w], seed, std::sqrt(2.0 / in));
  }

  Tensor<T> forward(Store<T>& st, const Tensor<T>& x, bool train) {
    const auto hw = static_cast<Eigen::Index>(x.plane());
    MapCM<T> W(st[w].value.data(), in, out * 4);
    MapCM<T> X(x.data.data(), in, hw);
    Mat<T> Yp = W.transpose() * X;  // (out*4) x hw
    Tensor<T> y(out, x.h * 2, x.w * 2);
    const auto& bias = st[b].value;
    for (int o = 0; o < out; ++o)
      for (int a = 0; a < 2; ++a)
        for (int bb = 0; bb < 2; ++bb) {
          const auto row = Yp.row(o * 4 + a * 2 + bb);
          T* dst = y.channel(o);
          for (int i = 0; i < x.h; ++i)
            for (int j = 0; j < x.w; ++j)
              dst[static_cast<std::size_t>(2 * i + a) * y.w + (2 * j + bb)] =
                  row(static_cast<Eigen::Index>(i) * x.w + j) + bias[static_cast<std::size_t>(o)];
        }
    if (train) input = x;
    return y;
  }

  Tensor<T> backward(Store<T>& st, const Tensor<T>& dy) {
    const int h = input.h, wd = input.w;
    const auto hw = static_cast<Eigen::Index>(input.plane());
    Mat<T> dYp(out * 4, hw);
    auto& db = st[b].grad;
    for (int o = 0; o < out; ++o) {
      const T* src = dy.channel(o);
      T sum = 0;
      for (int a = 0; a < 2; ++a)
        for (int bb = 0; bb < 2; ++bb)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < wd; ++j) {
              const T v = src[static_cast<std::size_t>(2 * i + a) * dy.w + (2 * j + bb)];
              dYp(o * 4 + a * 2 + bb, static_cast<Eigen::Index>(i) * wd + j) = v;
              sum += v;
            }
      db[static_cast<std::size_t>(o)] += sum;
    }
    MapCM<T> W(st[w].value.data(), in, out * 4);
    MapCM<T> X(input.data.data(), in, hw);
    MapM<T>(st[w].grad.data(), in, out * 4).noalias() += X * dYp.transpose();
    Tensor<T> dx(in, h, wd);
    MapM<T>(dx.data.data(), in, hw).noalias() = W * dYp;
    return dx;
  }
};

template <typename T>
struct GroupNorm {
  int channels = 0, groups = 1;
  std::size_t gamma = 0, beta = 0;
  Tensor<T> xhat;
  std::vector<double> inv_std;
  static constexpr double kEps = 1e-5;

  GroupNorm() = default;
  GroupNorm(Store<T>& st, const std::string& name, int c, int requested_groups) : channels(c) {
    groups = std::gcd(c, requested_groups);
    gamma = st.add(name + ".gamma", {c});
    beta = st.add(name + ".beta", {c});
    init_const(st[gamma], 1.0);
  }

  Tensor<T> forward(Store<T>& st, const Tensor<T>& x, bool train) {
    const int per = channels / groups;
    const std::size_t n = static_cast<std::size_t>(per) * x.plane();
    Tensor<T> y(x.c, x.h, x.w);
    if (train) {
      xhat = Tensor<T>(x.c, x.h, x.w);
      inv_std.assign(static_cast<std::size_t>(groups), 0.0);
    }
    const auto& g = st[gamma].value;
    const auto& bt = st[beta].value;
    for (int gi = 0; gi < groups; ++gi) {
      const T* src = x.channel(gi * per);
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += src[i];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) var += (src[i] - mean) * (src[i] - mean);
      var /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + kEps);
      if (train) inv_std[static_cast<std::size_t>(gi)] = is;
      for (int c = gi * per; c < (gi + 1) * per; ++c) {
        const T* s = x.channel(c);
        T* d = y.channel(c);
        T* xh = train ? xhat.channel(c) : nullptr;
        const double gc = g[static_cast<std::size_t>(c)], bc = bt[static_cast<std::size_t>(c)];
        for (std::size_t i = 0; i < x.plane(); ++i) {
          const double v = (s[i] - mean) * is;
          if (xh) xh[i] = static_cast<T>(v);
          d[i] = static_cast<T>(gc * v + bc);
        }
      }
    }
    return y;
  }

  Tensor<T> backward(Store<T>& st, const Tensor<T>& dy) {
    const int per = channels / groups;
    const std::size_t plane = dy.plane();
    const double n = static_cast<double>(per) * static_cast<double>(plane);
    const auto& g = st[gamma].value;
    auto& dg = st[gamma].grad;
    auto& dbt = st[beta].grad;
    Tensor<T> dx(dy.c, dy.h, dy.w);
    for (int gi = 0; gi < groups; ++gi) {
      double sum_d = 0.0, sum_dx = 0.0;
      for (int c = gi * per; c < (gi + 1) * per; ++c) {
        const T* d = dy.channel(c);
        const T* xh = xhat.channel(c);
        double sg = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          sg += static_cast<double>(d[i]) * xh[i];
          sb += d[i];
        }
        dg[static_cast<std::size_t>(c)] += static_cast<T>(sg);
        dbt[static_cast<std::size_t>(c)] += static_cast<T>(sb);
        const double gc = g[static_cast<std::size_t>(c)];
        sum_d += gc * sb;
        sum_dx += gc * sg;
      }
      const double is = inv_std[static_cast<std::size_t>(gi)];
      for (int c = gi * per; c < (gi + 1) * per; ++c) {
        const T* d = dy.channel(c);
        const T* xh = xhat.channel(c);
        T* o = dx.channel(c);
        const double gc = g[static_cast<std::size_t>(c)];
        for (std::size_t i = 0; i < plane; ++i)
          o[i] = static_cast<T>(is / n * (n * gc * d[i] - sum_d - xh[i] * sum_dx));
      }
    }
    return dx;
  }
};

template <typename T>
struct Relu {
  Tensor<T> out;
  Tensor<T> forward(const Tensor<T>& x, bool train) {
    Tensor<T> y = x;
    for (auto& v : y.data) v = std::max(v, T(0));
    if (train) out = y;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.data.size(); ++i)
      if (!(out.data[i] > T(0))) dx.data[i] = T(0);
    return dx;
  }
};

template <typename T>
T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

/// Mean of the Tanimoto coefficient over depths 0..d and its partials with
/// respect to (dot, sq).
struct MeanTanimoto {
  double value = 0.0, d_dot = 0.0, d_sq = 0.0;
};

MeanTanimoto mean_tanimoto(double dot, double sq, int d) {
  MeanTanimoto m;
  const train::TanimotoSums s{dot, sq};
  for (int i = 0; i <= d; ++i) {
    m.value += train::tanimoto_from_sums(s, i);
    const auto p = train::tanimoto_partials(s, i);
    m.d_dot += p[0];
    m.d_sq += p[1];
  }
  m.value /= d + 1;
  m.d_dot /= d + 1;
  m.d_sq /= d + 1;
  return m;
}

template <typename T>
struct Attention {
  int channels = 0, depth = 0;
  Conv<T> q, k;
  std::size_t gate = 0;
  // Cache
  Tensor<T> x, qv, kv;
  std::vector<MeanTanimoto> chan, spat;

  Attention() = default;
  Attention(Store<T>& st, const std::string& name, int c, int d, std::uint64_t seed) : channels(c), depth(d) {
    q = Conv<T>(st, name + ".q", c, c, 1, 1, seed, 1.0);
    k = Conv<T>(st, name + ".k", c, c, 1, 1, seed, 1.0);
    gate = st.add(name + ".gate", {c}, true);
  }

  void similarities(const Tensor<T>& Q, const Tensor<T>& K) {
    const std::size_t n = Q.plane();
    chan.assign(static_cast<std::size_t>(channels), {});
    std::vector<double> pdot(n, 0.0), psq(n, 0.0);
    for (int c = 0; c < channels; ++c) {
      const T* a = Q.channel(c);
      const T* b = K.channel(c);
      double dot = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double ab = static_cast<double>(a[i]) * b[i], df = static_cast<double>(a[i]) - b[i];
        dot += ab;
        sq += df * df;
        pdot[i] += ab;
        psq[i] += df * df;
      }
      chan[static_cast<std::size_t>(c)] = mean_tanimoto(dot, sq, depth);
    }
    spat.resize(n);
    for (std::size_t i = 0; i < n; ++i) spat[i] = mean_tanimoto(pdot[i], psq[i], depth);
  }

  /// Attention map A = g_c * S_c * R_p for inspection.
  Tensor<T> attention_map(Store<T>& st, const Tensor<T>& in) {
    auto Q = q.forward(st, in, false), K = k.forward(st, in, false);
    for (auto& v : Q.data) v = sigmoid(v);
    for (auto& v : K.data) v = sigmoid(v);
    similarities(Q, K);
    Tensor<T> a(in.c, in.h, in.w);
    const auto& g = st[gate].value;
    for (int c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < in.plane(); ++i)
        a.channel(c)[i] = static_cast<T>(g[static_cast<std::size_t>(c)] * chan[static_cast<std::size_t>(c)].value * spat[i].value);
    return a;
  }

  Tensor<T> forward(Store<T>& st, const Tensor<T>& in, bool train) {
    auto Q = q.forward(st, in, train), K = k.forward(st, in, train);
    for (auto& v : Q.data) v = sigmoid(v);
    for (auto& v : K.data) v = sigmoid(v);
    similarities(Q, K);
    Tensor<T> y(in.c, in.h, in.w);
    const auto& g = st[gate].value;
    const std::size_t n = in.plane();
    for (int c = 0; c < channels; ++c) {
      const double gs = g[static_cast<std::size_t>(c)] * chan[static_cast<std::size_t>(c)].value;
      const T* s = in.channel(c);
      T* d = y.channel(c);
      for (std::size_t i = 0; i < n; ++i) d[i] = static_cast<T>(s[i] * (1.0 + gs * spat[i].value));
    }
    if (train) {
      x = in;
      qv = std::move(Q);
      kv = std::move(K);
    }
    return y;
  }

  Tensor<T> backward(Store<T>& st, const Tensor<T>& dy) {
    const std::size_t n = x.plane();
    const auto& g = st[gate].value;
    auto& dg = st[gate].grad;
    Tensor<T> dx(x.c, x.h, x.w);
    std::vector<double> dS(static_cast<std::size_t>(channels), 0.0), dR(n, 0.0);
    for (int c = 0; c < channels; ++c) {
      const auto cs = static_cast<std::size_t>(c);
      const double S = chan[cs].value, gc = g[cs];
      const T* d = dy.channel(c);
      const T* xv = x.channel(c);
      T* o = dx.channel(c);
      double sum_g = 0.0, sum_s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double R = spat[i].value;
        o[i] = static_cast<T>(d[i] * (1.0 + gc * S * R));
        const double dA = static_cast<double>(d[i]) * xv[i];
        sum_g += dA * S * R;
        sum_s += dA * gc * R;
        dR[i] += dA * gc * S;
      }
      dg[cs] += static_cast<T>(sum_g);
      dS[cs] = sum_s;
    }
    // Back through the similarities into Q and K, then through the sigmoids.
    Tensor<T> dzq(x.c, x.h, x.w), dzk(x.c, x.h, x.w);
    bool any = false;
    for (int c = 0; c < channels; ++c) {
      const auto cs = static_cast<std::size_t>(c);
      const double cd = dS[cs] * chan[cs].d_dot, cq = dS[cs] * chan[cs].d_sq;
      const T* qa = qv.channel(c);
      const T* ka = kv.channel(c);
      T* gq = dzq.channel(c);
      T* gk = dzk.channel(c);
      for (std::size_t i = 0; i < n; ++i) {
        const double sd = dR[i] * spat[i].d_dot, sq = dR[i] * spat[i].d_sq;
        const double qa_i = qa[i], ka_i = ka[i], diff = qa_i - ka_i;
        const double dq = (cd + sd) * ka_i + 2.0 * (cq + sq) * diff;
        const double dk = (cd + sd) * qa_i - 2.0 * (cq + sq) * diff;
        gq[i] = static_cast<T>(dq * qa_i * (1.0 - qa_i));
        gk[i] = static_cast<T>(dk * ka_i * (1.0 - ka_i));
        any |= gq[i] != T(0) || gk[i] != T(0);
      }
    }
    if (!any) {
      // A closed gate passes no signal to the projections; skip the GEMMs.
      return dx;
    }
    const auto a = q.backward(st, dzq);
    const auto b = k.backward(st, dzk);
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += a.data[i] + b.data[i];
    return dx;
  }
};

template <typename T>
struct ResBlock {
  GroupNorm<T> gn1, gn2;
  Relu<T> r1, r2;
  Conv<T> c1, c2;
  bool use_att = false;
  Attention<T> att;

  ResBlock() = default;
  ResBlock(Store<T>& st, const std::string& name, int c, const NetworkSpec& spec, std::uint64_t seed) {
    gn1 = GroupNorm<T>(st, name + ".gn1", c, spec.norm_groups);
    // Group norm follows, which cancels any bias.
    c1 = Conv<T>(st, name + ".conv1", c, c, 3, 1, seed, 2.0, false);
    gn2 = GroupNorm<T>(st, name + ".gn2", c, spec.norm_groups);
    // Small residual branches at initialization keep deep stacks stable.
    c2 = Conv<T>(st, name + ".conv2", c, c, 3, 1, seed, 0.5);
    use_att = spec.attention;
    if (use_att) att = Attention<T>(st, name + ".att", c, spec.attention_depth, seed);
  }

  Tensor<T> forward(Store<T>& st, const Tensor<T>& x, bool train) {
    auto h = c1.forward(st, r1.forward(gn1.forward(st, x, train), train), train);
    h = c2.forward(st, r2.forward(gn2.forward(st, h, train), train), train);
    if (use_att) h = att.forward(st, h, train);
    for (std::size_t i = 0; i < h.data.size(); ++i) h.data[i] += x.data[i];
    return h;
  }

  Tensor<T> backward(Store<T>& st, const Tensor<T>& dy) {
    Tensor<T> dh = use_att ? att.backward(st, dy) : dy;
    dh = gn2.backward(st, r2.backward(c2.backward(st, dh)));
    dh = gn1.backward(st, r1.backward(c1.backward(st, dh)));
    for (std::size_t i = 0; i < dh.data.size(); ++i) dh.data[i] += dy.data[i];
    return dh;
  }
};

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out(a.c + b.c, a.h, a.w);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split(const Tensor<T>& t, int ca) {
  Tensor<T> a(ca, t.h, t.w), b(t.c - ca, t.h, t.w);
  std::copy(t.data.begin(), t.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()), a.data.begin());
  std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()), t.data.end(), b.data.begin());
  return {a, b};
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

constexpr const char* kHeadNames[3] = {"extent", "boundary", "distance"};

}  // namespace

template <typename T>
struct Network<T>::Impl {
  NetworkSpec spec;
  Store<T> store;
  Conv<T> stem;
  std::vector<ResBlock<T>> enc;
  std::vector<Conv<T>> down;
  ResBlock<T> bridge;
  std::vector<UpConv<T>> up;
  std::vector<Conv<T>> combine;
  std::vector<ResBlock<T>> dec;
  GroupNorm<T> final_gn;
  Relu<T> final_relu;
  std::array<Conv<T>, 3> tail_conv;
  std::array<GroupNorm<T>, 3> tail_gn;
  std::array<Relu<T>, 3> tail_relu;
  std::array<Conv<T>, 3> head;
  // Cache
  std::array<Tensor<T>, 3> head_sigmoid;
  std::vector<int> skip_channels;
  int in_h = 0, in_w = 0;
  bool have_cache = false;

  Impl(const NetworkSpec& s, std::uint64_t seed) : spec(s) {
    spec.validate();
    const int F = spec.base_filters;
    stem = Conv<T>(store, "stem", spec.in_channels, F, 3, 1, seed);
    for (int i = 0; i < spec.depth; ++i) {
      const int f = F << i;
      enc.emplace_back(store, "enc" + std::to_string(i), f, spec, seed);
      down.emplace_back(store, "down" + std::to_string(i), f, f * 2, 2, 2, seed);
    }
    bridge = ResBlock<T>(store, "bridge", F << spec.depth, spec, seed);
    up.resize(static_cast<std::size_t>(spec.depth));
    combine.resize(static_cast<std::size_t>(spec.depth));
    dec.resize(static_cast<std::size_t>(spec.depth));
    for (int i = spec.depth - 1; i >= 0; --i) {
      const int f = F << i;
      const auto si = static_cast<std::size_t>(i);
      up[si] = UpConv<T>(store, "up" + std::to_string(i), f * 2, f, seed);
      combine[si] = Conv<T>(store, "combine" + std::to_string(i), f * 2, f, 1, 1, seed);
      dec[si] = ResBlock<T>(store, "dec" + std::to_string(i), f, spec, seed);
    }
    final_gn = GroupNorm<T>(store, "final.gn", F, spec.norm_groups);
    for (int t = 0; t < 3; ++t) {
      const std::string hn = kHeadNames[t];
      if (spec.separate_heads) {
        tail_conv[static_cast<std::size_t>(t)] = Conv<T>(store, "tail_" + hn + ".conv", F, F, 3, 1, seed, 2.0, false);
        tail_gn[static_cast<std::size_t>(t)] = GroupNorm<T>(store, "tail_" + hn + ".gn", F, spec.norm_groups);
      }
      head[static_cast<std::size_t>(t)] = Conv<T>(store, "head_" + hn, F, 1, 1, 1, seed, 1.0);
    }
  }

  Outputs<T> forward(const Tensor<T>& x, bool train) {
    const int m = spec.size_multiple();
    if (x.c != spec.in_channels)
      throw ShapeError("network expects " + std::to_string(spec.in_channels) + " input channels, got " +
                       std::to_string(x.c));
    if (x.h % m || x.w % m || x.h == 0 || x.w == 0)
      throw ShapeError("input size " + std::to_string(x.h) + "x" + std::to_string(x.w) + " must be a positive multiple of " +
                       std::to_string(m));
    in_h = x.h;
    in_w = x.w;
    std::vector<Tensor<T>> skips;
    auto h = stem.forward(store, x, train);
    for (int i = 0; i < spec.depth; ++i) {
      const auto si = static_cast<std::size_t>(i);
      h = enc[si].forward(store, h, train);
      skips.push_back(h);
      h = down[si].forward(store, h, train);
    }
    h = bridge.forward(store, h, train);
    skip_channels.clear();
    for (int i = spec.depth - 1; i >= 0; --i) {
      const auto si = static_cast<std::size_t>(i);
      auto u = up[si].forward(store, h, train);
      skip_channels.push_back(u.c);
      h = combine[si].forward(store, concat(u, skips[si]), train);
      h = dec[si].forward(store, h, train);
    }
    const auto feat = final_relu.forward(final_gn.forward(store, h, train), train);
    Outputs<T> out;
    for (int t = 0; t < 3; ++t) {
      const auto ts = static_cast<std::size_t>(t);
      Tensor<T> z;
      if (spec.separate_heads) {
        auto tf = tail_conv[ts].forward(store, feat, train);
        tf = tail_relu[ts].forward(tail_gn[ts].forward(store, tf, train), train);
        z = head[ts].forward(store, tf, train);
      } else {
        z = head[ts].forward(store, feat, train);
      }
      for (auto& v : z.data) v = sigmoid(v);
      if (train) head_sigmoid[ts] = z;
      // Keep outputs strictly inside (0, 1) even where the sigmoid saturates.
      const T lo = std::is_same_v<T, float> ? T(1e-6) : T(1e-12);
      for (auto& v : z.data) v = std::clamp(v, lo, T(1) - lo);
      out.maps[ts] = std::move(z);
    }
    have_cache = train;
    return out;
  }

  Tensor<T> backward(const std::array<Tensor<T>, 3>& grads) {
    if (!have_cache) throw Error(ErrorCode::Runtime, "backward() needs a preceding training forward pass");
    have_cache = false;
    Tensor<T> dfeat;
    for (int t = 0; t < 3; ++t) {
      const auto ts = static_cast<std::size_t>(t);
      const auto& s = head_sigmoid[ts];
      if (grads[ts].data.size() != s.data.size()) throw ShapeError("output gradient has wrong size");
      Tensor<T> dz(1, s.h, s.w);
      for (std::size_t i = 0; i < s.data.size(); ++i) dz.data[i] = grads[ts].data[i] * s.data[i] * (T(1) - s.data[i]);
      Tensor<T> d = head[ts].backward(store, dz);
      if (spec.separate_heads) d = tail_conv[ts].backward(store, tail_gn[ts].backward(store, tail_relu[ts].backward(d)));
      if (t == 0)
        dfeat = std::move(d);
      else
        add_into(dfeat, d);
    }
    auto dh = final_gn.backward(store, final_relu.backward(dfeat));
    std::vector<Tensor<T>> dskips(static_cast<std::size_t>(spec.depth));
    for (int k = 0; k < spec.depth; ++k) {
      const int i = k;  // decoder ran from depth-1 down to 0; unwind from 0 up
      const auto si = static_cast<std::size_t>(i);
      dh = dec[si].backward(store, dh);
      dh = combine[si].backward(store, dh);
      auto [du, ds] = split(dh, skip_channels[static_cast<std::size_t>(spec.depth - 1 - i)]);
      dskips[si] = std::move(ds);
      dh = up[si].backward(store, du);
    }
    dh = bridge.backward(store, dh);
    for (int i = spec.depth - 1; i >= 0; --i) {
      const auto si = static_cast<std::size_t>(i);
      dh = down[si].backward(store, dh);
      add_into(dh, dskips[si]);
      dh = enc[si].backward(store, dh);
    }
    return stem.backward(store, dh);
  }
};

template <typename T>
Network<T>::Network(const NetworkSpec& spec, std::uint64_t seed) : impl_(std::make_unique<Impl>(spec, seed)) {}
template <typename T>
Network<T>::~Network() = default;
template <typename T>
Network<T>::Network(Network&&) noexcept = default;
template <typename T>
Network<T>& Network<T>::operator=(Network&&) noexcept = default;

template <typename T>
const NetworkSpec& Network<T>::spec() const {
  return impl_->spec;
}

template <typename T>
Outputs<T> Network<T>::forward(const Tensor<T>& x, bool train) {
  return impl_->forward(x, train);
}

template <typename T>
Tensor<T> Network<T>::backward(const std::array<Tensor<T>, 3>& grad_outputs) {
  return impl_->backward(grad_outputs);
}

template <typename T>
std::vector<Parameter<T>>& Network<T>::parameters() {
  return impl_->store.params;
}

template <typename T>
const std::vector<Parameter<T>>& Network<T>::parameters() const {
  return impl_->store.params;
}

template <typename T>
Parameter<T>* Network<T>::find(const std::string& name) {
  for (auto& p : impl_->store.params)
    if (p.name == name) return &p;
  return nullptr;
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : impl_->store.params) n += p.value.size();
  return n;
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto& p : impl_->store.params) std::fill(p.grad.begin(), p.grad.end(), T(0));
}

template <typename T>
void Network<T>::project() {
  for (auto& p : impl_->store.params)
    if (p.unit_interval)
      for (auto& v : p.value) v = std::clamp(v, T(0), T(1));
}

template <typename T>
template <typename U>
void Network<T>::copy_values_from(const Network<U>& other) {
  auto& mine = impl_->store.params;
  const auto& theirs = other.impl_->store.params;
  if (mine.size() != theirs.size()) throw ShapeError("networks differ in parameter count");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].name != theirs[i].name || mine[i].shape != theirs[i].shape)
      throw ShapeError("parameter mismatch at " + mine[i].name);
    std::transform(theirs[i].value.begin(), theirs[i].value.end(), mine[i].value.begin(),
                   [](U v) { return static_cast<T>(v); });
  }
}

template class Network<float>;
template class Network<double>;
template void Network<float>::copy_values_from(const Network<float>&);
template void Network<float>::copy_values_from(const Network<double>&);
template void Network<double>::copy_values_from(const Network<float>&);
template void Network<double>::copy_values_from(const Network<double>&);

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

Json provenance_to_json(const Provenance& p) {
  Json j;
  j["train_dataset_id"] = p.train_dataset_id;
  j["epoch"] = p.epoch;
  j["val_mcc"] = std::isfinite(p.val_mcc) ? Json(p.val_mcc) : Json(nullptr);
  j["parent_checkpoint_id"] = p.parent_checkpoint_id ? Json(*p.parent_checkpoint_id) : Json(nullptr);
  return j;
}

Provenance provenance_from_json(const Json& j) {
  Provenance p;
  p.train_dataset_id = j.value("train_dataset_id", std::string());
  p.epoch = j.value("epoch", 0);
  p.val_mcc = j.contains("val_mcc") && !j.at("val_mcc").is_null() ? j.at("val_mcc").get<double>()
                                                                   : std::numeric_limits<double>::quiet_NaN();
  if (j.contains("parent_checkpoint_id") && !j.at("parent_checkpoint_id").is_null())
    p.parent_checkpoint_id = j.at("parent_checkpoint_id").get<std::string>();
  return p;
}

}  // namespace

std::string Checkpoint::id() const {
  std::uint64_t h = fnv1a(spec_to_json(spec).dump());
  h = fnv1a(provenance_to_json(provenance).dump(), h);
  for (std::size_t i = 0; i < names.size(); ++i) {
    h = fnv1a(names[i], h);
    h = fnv1a_bytes(values[i].data(), values[i].size() * sizeof(float), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename T>
Checkpoint make_checkpoint(const Network<T>& net, const Provenance& prov) {
  Checkpoint ck;
  ck.spec = net.spec();
  ck.provenance = prov;
  for (const auto& p : net.parameters()) {
    ck.names.push_back(p.name);
    ck.shapes.push_back(p.shape);
    std::vector<float> v(p.value.size());
    std::transform(p.value.begin(), p.value.end(), v.begin(), [](T x) { return static_cast<float>(x); });
    ck.values.push_back(std::move(v));
  }
  return ck;
}

template Checkpoint make_checkpoint<float>(const Network<float>&, const Provenance&);
template Checkpoint make_checkpoint<double>(const Network<double>&, const Provenance&);

template <typename T>
void load_parameters(Network<T>& net, const Checkpoint& ck) {
  auto& params = net.parameters();
  if (params.size() != ck.names.size())
    throw ShapeError("checkpoint has " + std::to_string(ck.names.size()) + " tensors, network expects " +
                     std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != ck.names[i] || params[i].shape != ck.shapes[i])
      throw ShapeError("checkpoint tensor " + ck.names[i] + " does not match network parameter " + params[i].name);
    std::transform(ck.values[i].begin(), ck.values[i].end(), params[i].value.begin(),
                   [](float v) { return static_cast<T>(v); });
  }
}

template void load_parameters<float>(Network<float>&, const Checkpoint&);
template void load_parameters<double>(Network<double>&, const Checkpoint&);

Network<float> network_from_checkpoint(const Checkpoint& ck) {
  Network<float> net(ck.spec, 0);
  load_parameters(net, ck);
  return net;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& stem) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  Json j;
  j["spec"] = spec_to_json(ck.spec);
  j["provenance"] = provenance_to_json(ck.provenance);
  j["id"] = ck.id();
  Json tensors = Json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < ck.names.size(); ++i) {
    Json t;
    t["name"] = ck.names[i];
    t["shape"] = ck.shapes[i];
    t["dtype"] = "float32";
    t["offset"] = offset;
    tensors.push_back(t);
    offset += ck.values[i].size() * sizeof(float);
  }
  j["tensors"] = tensors;
  auto bin = stem;
  bin += ".bin";
  std::ofstream out(bin, std::ios::binary);
  if (!out) throw IoError("cannot write " + bin.string());
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  for (const auto& v : ck.values) out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  if (!out) throw IoError("short write to " + bin.string());
  auto js = stem;
  js += ".json";
  write_json_file(js, j);
}

Checkpoint load_checkpoint(const std::filesystem::path& stem) {
  auto js = stem;
  js += ".json";
  auto bin = stem;
  bin += ".bin";
  const auto j = read_json_file(js);
  Checkpoint ck;
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw IoError("cannot read " + bin.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    ck.spec = spec_from_json(j.at("spec"));
    ck.provenance = provenance_from_json(j.at("provenance"));
    for (const auto& t : j.at("tensors")) {
      if (t.at("dtype").get<std::string>() != "float32") throw FormatError("unsupported tensor dtype");
      ck.names.push_back(t.at("name").get<std::string>());
      ck.shapes.push_back(t.at("shape").get<std::vector<int>>());
      std::size_t n = 1;
      for (int s : ck.shapes.back()) n *= static_cast<std::size_t>(s);
      const auto off = t.at("offset").get<std::size_t>();
      if (off + n * sizeof(float) > bytes.size()) throw FormatError("tensor " + ck.names.back() + " overruns " + bin.string());
      std::vector<float> v(n);
      std::memcpy(v.data(), bytes.data() + off, n * sizeof(float));
      ck.values.push_back(std::move(v));
    }
    if (j.contains("id") && j.at("id").get<std::string>() != ck.id())
      throw FormatError("checkpoint id mismatch: " + stem.string() + " is corrupt");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint index: ") + e.what());
  }
  return ck;
}

}  // namespace fieldkit::net
