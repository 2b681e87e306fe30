#include "pluralfill/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

#include "gemm.hpp"
#include "pluralfill/errors.hpp"

namespace pluralfill {
namespace {

using detail::gemm_nn;
using detail::gemm_nt;
using detail::gemm_tn;

Tape& tape_of(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (Var v : vars) {
    if (!v.valid()) throw Error("unbound Var passed to an op");
    if (t && v.tape != t) throw Error("op inputs live on different tapes");
    t = v.tape;
  }
  return *t;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// ---- broadcasting -------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<int64_t> stride_a, stride_b;  // per output dim, 0 where broadcast
  bool same = false;
};

Broadcast make_broadcast(const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<long>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<long>(r - b.size()));
  bc.out.resize(r);
  for (size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  int64_t sa = 1, sb = 1;
  for (size_t i = r; i-- > 0;) {
    if (pa[i] != 1) bc.stride_a[i] = sa;
    if (pb[i] != 1) bc.stride_b[i] = sb;
    sa *= pa[i];
    sb *= pb[i];
  }
  return bc;
}

template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const int64_t n = numel(bc.out);
  if (bc.same) {
    for (int64_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const size_t r = bc.out.size();
  std::vector<int64_t> idx(r, 0);
  int64_t ia = 0, ib = 0;
  // Innermost dimension handled as a tight loop.
  const int64_t inner = r ? bc.out[r - 1] : 1;
  const int64_t sa_in = r ? bc.stride_a[r - 1] : 0;
  const int64_t sb_in = r ? bc.stride_b[r - 1] : 0;
  for (int64_t i = 0; i < n; i += inner) {
    for (int64_t j = 0; j < inner; ++j) f(i + j, ia + j * sa_in, ib + j * sb_in);
    for (size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * idx[d];
      ib -= bc.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

// ---- im2col -------------------------------------------------------------

struct ConvGeom {
  int64_t C, H, W, k, stride, pad, Ho, Wo;
};

void im2col(const ConvGeom& g, const float* x, float* col) {
  const int64_t hw = g.Ho * g.Wo;
  for (int64_t c = 0; c < g.C; ++c) {
    for (int64_t ky = 0; ky < g.k; ++ky) {
      for (int64_t kx = 0; kx < g.k; ++kx) {
        float* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        for (int64_t oy = 0; oy < g.Ho; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          float* dst = row + oy * g.Wo;
          if (iy < 0 || iy >= g.H) {
            std::fill(dst, dst + g.Wo, 0.0f);
            continue;
          }
          const float* src = x + (c * g.H + iy) * g.W;
          for (int64_t ox = 0; ox < g.Wo; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.W) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeom& g, const float* col, float* dx) {
  const int64_t hw = g.Ho * g.Wo;
  for (int64_t c = 0; c < g.C; ++c) {
    for (int64_t ky = 0; ky < g.k; ++ky) {
      for (int64_t kx = 0; kx < g.k; ++kx) {
        const float* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        for (int64_t oy = 0; oy < g.Ho; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.H) continue;
          float* dst = dx + (c * g.H + iy) * g.W;
          const float* src = row + oy * g.Wo;
          for (int64_t ox = 0; ox < g.Wo; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <class Fwd, class Deriv>
Var unary(const char* op, Var x, Fwd fwd, Deriv deriv) {
  Tape& t = tape_of({x});
  return t.apply(
      op, {x},
      [fwd](Inputs in) {
        Array out(in[0]->shape());
        const auto src = in[0]->data();
        auto dst = out.data();
        for (size_t i = 0; i < src.size(); ++i) dst[i] = fwd(src[i]);
        return out;
      },
      [deriv](const Array& g, Inputs in, const Array& out, GradSlots gs) {
        if (!gs[0]) return;
        const auto x = in[0]->data();
        const auto y = out.data();
        auto dx = gs[0]->data();
        for (size_t i = 0; i < x.size(); ++i) dx[i] += g[static_cast<int64_t>(i)] * deriv(x[i], y[i]);
      });
}

int64_t rows_of(const Array& a) { return a.size() / a.dim(-1); }

}  // namespace

// ---- elementwise --------------------------------------------------------

Var add(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const Broadcast bc = make_broadcast(a.shape(), b.shape());
  return t.apply(
      "add", {a, b},
      [bc](Inputs in) {
        Array out(bc.out);
        const auto x = in[0]->data(), y = in[1]->data();
        auto o = out.data();
        for_each_broadcast(bc, [&](int64_t i, int64_t ia, int64_t ib) { o[i] = x[ia] + y[ib]; });
        return out;
      },
      [bc](const Array& g, Inputs, const Array&, GradSlots gs) {
        const auto gd = g.data();
        if (gs[0]) {
          auto ga = gs[0]->data();
          for_each_broadcast(bc, [&](int64_t i, int64_t ia, int64_t) { ga[ia] += gd[i]; });
        }
        if (gs[1]) {
          auto gb = gs[1]->data();
          for_each_broadcast(bc, [&](int64_t i, int64_t, int64_t ib) { gb[ib] += gd[i]; });
        }
      });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const Broadcast bc = make_broadcast(a.shape(), b.shape());
  return t.apply(
      "sub", {a, b},
      [bc](Inputs in) {
        Array out(bc.out);
        const auto x = in[0]->data(), y = in[1]->data();
        auto o = out.data();
        for_each_broadcast(bc, [&](int64_t i, int64_t ia, int64_t ib) { o[i] = x[ia] - y[ib]; });
        return out;
      },
      [bc](const Array& g, Inputs, const Array&, GradSlots gs) {
        const auto gd = g.data();
        if (gs[0]) {
          auto ga = gs[0]->data();
          for_each_broadcast(bc, [&](int64_t i, int64_t ia, int64_t) { ga[ia] += gd[i]; });
        }
        if (gs[1]) {
          auto gb = gs[1]->data();
          for_each_broadcast(bc, [&](int64_t i, int64_t, int64_t ib) { gb[ib] -= gd[i]; });
        }
      });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const Broadcast bc = make_broadcast(a.shape(), b.shape());
  return t.apply(
      "mul", {a, b},
      [bc](Inputs in) {
        Array out(bc.out);
        const auto x = in[0]->data(), y = in[1]->data();
        auto o = out.data();
        for_each_broadcast(bc, [&](int64_t i, int64_t ia, int64_t ib) { o[i] = x[ia] * y[ib]; });
        return out;
      },
      [bc](const Array& g, Inputs in, const Array&, GradSlots gs) {
        const auto gd = g.data();
        const auto x = in[0]->data(), y = in[1]->data();
        if (gs[0]) {
          auto ga = gs[0]->data();
          for_each_broadcast(bc, [&](int64_t i, int64_t ia, int64_t ib) { ga[ia] += gd[i] * y[ib]; });
        }
        if (gs[1]) {
          auto gb = gs[1]->data();
          for_each_broadcast(bc, [&](int64_t i, int64_t ia, int64_t ib) { gb[ib] += gd[i] * x[ia]; });
        }
      });
}

Var scale(Var x, float factor) {
  return unary(
      "scale", x, [factor](float v) { return v * factor; },
      [factor](float, float) { return factor; });
}

Var add_scalar(Var x, float c) {
  return unary(
      "add_scalar", x, [c](float v) { return v + c; }, [](float, float) { return 1.0f; });
}

Var relu(Var x) {
  return unary(
      "relu", x, [](float v) { return v > 0.0f ? v : 0.0f; },
      [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Var leaky_relu(Var x, float slope) {
  return unary(
      "leaky_relu", x, [slope](float v) { return v > 0.0f ? v : slope * v; },
      [slope](float v, float) { return v > 0.0f ? 1.0f : slope; });
}

Var gelu(Var x) {
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  constexpr float kInvSqrt2Pi = 0.39894228040143268f;
  return unary(
      "gelu", x, [](float v) { return 0.5f * v * (1.0f + std::erf(v * kInvSqrt2)); },
      [](float v, float) {
        return 0.5f * (1.0f + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5f * v * v);
      });
}

Var tanh(Var x) {
  return unary(
      "tanh", x, [](float v) { return std::tanh(v); },
      [](float, float y) { return 1.0f - y * y; });
}

// ---- linear algebra -----------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& t = tape_of({a, b});
  require(a.shape().size() == 2 && b.shape().size() == 2 && a.shape()[1] == b.shape()[0],
          "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  return t.apply(
      "matmul", {a, b},
      [=](Inputs in) {
        Array out({M, N});
        gemm_nn(M, N, K, in[0]->data().data(), in[1]->data().data(), out.data().data(), false);
        return out;
      },
      [=](const Array& g, Inputs in, const Array&, GradSlots gs) {
        if (gs[0]) gemm_nt(M, K, N, g.data().data(), in[1]->data().data(), gs[0]->data().data(), true);
        if (gs[1]) gemm_tn(K, N, M, in[0]->data().data(), g.data().data(), gs[1]->data().data(), true);
      });
}

Var bmm(Var a, Var b, bool transpose_b) {
  Tape& t = tape_of({a, b});
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0],
          "bmm: " + shape_str(sa) + " x " + shape_str(sb));
  const int64_t B = sa[0], M = sa[1], K = sa[2];
  const int64_t N = transpose_b ? sb[1] : sb[2];
  require((transpose_b ? sb[2] : sb[1]) == K, "bmm inner dims: " + shape_str(sa) + " x " + shape_str(sb));
  return t.apply(
      "bmm", {a, b},
      [=](Inputs in) {
        Array out({B, M, N});
        const float* A = in[0]->data().data();
        const float* Bp = in[1]->data().data();
        float* O = out.data().data();
        for (int64_t i = 0; i < B; ++i) {
          if (transpose_b) {
            gemm_nt(M, N, K, A + i * M * K, Bp + i * N * K, O + i * M * N, false);
          } else {
            gemm_nn(M, N, K, A + i * M * K, Bp + i * K * N, O + i * M * N, false);
          }
        }
        return out;
      },
      [=](const Array& g, Inputs in, const Array&, GradSlots gs) {
        const float* A = in[0]->data().data();
        const float* Bp = in[1]->data().data();
        const float* G = g.data().data();
        for (int64_t i = 0; i < B; ++i) {
          const float* Ai = A + i * M * K;
          const float* Bi = Bp + i * K * N;
          const float* Gi = G + i * M * N;
          if (transpose_b) {
            // out = A B^T, B [N,K]
            if (gs[0]) gemm_nn(M, K, N, Gi, Bi, gs[0]->data().data() + i * M * K, true);
            if (gs[1]) gemm_tn(N, K, M, Gi, Ai, gs[1]->data().data() + i * N * K, true);
          } else {
            if (gs[0]) gemm_nt(M, K, N, Gi, Bi, gs[0]->data().data() + i * M * K, true);
            if (gs[1]) gemm_tn(K, N, M, Ai, Gi, gs[1]->data().data() + i * K * N, true);
          }
        }
      });
}

Var linear(Var x, Var w, Var bias) {
  const Shape xs = x.shape();
  require(!xs.empty() && w.shape().size() == 2 && xs.back() == w.shape()[0],
          "linear: " + shape_str(xs) + " x " + shape_str(w.shape()));
  const int64_t cin = xs.back();
  const int64_t cout = w.shape()[1];
  Var flat = reshape(x, {numel(xs) / cin, cin});
  Var y = add(matmul(flat, w), bias);
  Shape ys = xs;
  ys.back() = cout;
  return reshape(y, ys);
}

Var conv2d(Var x, Var w, Var bias, int stride, int padding) {
  Tape& t = tape_of({x, w, bias});
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  require(xs.size() == 4 && ws.size() == 4 && ws[1] == xs[1] && ws[2] == ws[3],
          "conv2d: x " + shape_str(xs) + " w " + shape_str(ws));
  require(bias.shape() == Shape{ws[0]}, "conv2d bias " + shape_str(bias.shape()));
  require(stride >= 1 && padding >= 0, "conv2d stride/padding");
  ConvGeom geo{xs[1], xs[2], xs[3], ws[2], stride, padding, 0, 0};
  geo.Ho = (geo.H + 2 * padding - geo.k) / stride + 1;
  geo.Wo = (geo.W + 2 * padding - geo.k) / stride + 1;
  require(geo.Ho > 0 && geo.Wo > 0, "conv2d output would be empty for " + shape_str(xs));
  const int64_t B = xs[0], O = ws[0];
  const int64_t ckk = geo.C * geo.k * geo.k;
  const int64_t hw = geo.Ho * geo.Wo;
  return t.apply(
      "conv2d", {x, w, bias},
      [=](Inputs in) {
        Array out({B, O, geo.Ho, geo.Wo});
        std::vector<float> col(static_cast<size_t>(ckk * hw));
        const float* X = in[0]->data().data();
        const float* Wt = in[1]->data().data();
        const float* bs = in[2]->data().data();
        float* Y = out.data().data();
        for (int64_t b = 0; b < B; ++b) {
          float* yb = Y + b * O * hw;
          for (int64_t o = 0; o < O; ++o) std::fill(yb + o * hw, yb + (o + 1) * hw, bs[o]);
          im2col(geo, X + b * geo.C * geo.H * geo.W, col.data());
          gemm_nn(O, hw, ckk, Wt, col.data(), yb, true);
        }
        return out;
      },
      [=](const Array& g, Inputs in, const Array&, GradSlots gs) {
        const float* X = in[0]->data().data();
        const float* Wt = in[1]->data().data();
        const float* G = g.data().data();
        std::vector<float> col(static_cast<size_t>(ckk * hw));
        std::vector<float> wt;
        if (gs[0]) {
          wt.resize(static_cast<size_t>(ckk * O));
          detail::transpose(O, ckk, Wt, wt.data());
        }
        for (int64_t b = 0; b < B; ++b) {
          const float* gb = G + b * O * hw;
          if (gs[2]) {
            float* db = gs[2]->data().data();
            for (int64_t o = 0; o < O; ++o) {
              double s = 0.0;
              for (int64_t i = 0; i < hw; ++i) s += gb[o * hw + i];
              db[o] += static_cast<float>(s);
            }
          }
          if (gs[1]) {
            im2col(geo, X + b * geo.C * geo.H * geo.W, col.data());
            gemm_nt(O, ckk, hw, gb, col.data(), gs[1]->data().data(), true);
          }
          if (gs[0]) {
            gemm_nn(ckk, hw, O, wt.data(), gb, col.data(), false);
            col2im_add(geo, col.data(), gs[0]->data().data() + b * geo.C * geo.H * geo.W);
          }
        }
      });
}

Var upsample2x(Var x) {
  Tape& t = tape_of({x});
  const Shape xs = x.shape();
  require(xs.size() == 4, "upsample2x expects [B,C,H,W], got " + shape_str(xs));
  const int64_t planes = xs[0] * xs[1], H = xs[2], W = xs[3];
  return t.apply(
      "upsample2x", {x},
      [=](Inputs in) {
        Array out({xs[0], xs[1], 2 * H, 2 * W});
        const float* X = in[0]->data().data();
        float* Y = out.data().data();
        for (int64_t p = 0; p < planes; ++p) {
          for (int64_t y = 0; y < 2 * H; ++y) {
            const float* src = X + (p * H + y / 2) * W;
            float* dst = Y + (p * 2 * H + y) * 2 * W;
            for (int64_t xx = 0; xx < 2 * W; ++xx) dst[xx] = src[xx / 2];
          }
        }
        return out;
      },
      [=](const Array& g, Inputs, const Array&, GradSlots gs) {
        if (!gs[0]) return;
        const float* G = g.data().data();
        float* D = gs[0]->data().data();
        for (int64_t p = 0; p < planes; ++p) {
          for (int64_t y = 0; y < 2 * H; ++y) {
            const float* src = G + (p * 2 * H + y) * 2 * W;
            float* dst = D + (p * H + y / 2) * W;
            for (int64_t xx = 0; xx < 2 * W; ++xx) dst[xx / 2] += src[xx];
          }
        }
      });
}

// ---- normalization along the last axis ------------------------------------

Var softmax(Var x) {
  Tape& t = tape_of({x});
  return t.apply(
      "softmax", {x},
      [](Inputs in) {
        const Array& a = *in[0];
        Array out(a.shape());
        const int64_t n = a.dim(-1), rows = rows_of(a);
        for (int64_t r = 0; r < rows; ++r) {
          const float* src = a.data().data() + r * n;
          float* dst = out.data().data() + r * n;
          const float mx = *std::max_element(src, src + n);
          double s = 0.0;
          for (int64_t i = 0; i < n; ++i) {
            dst[i] = std::exp(src[i] - mx);
            s += dst[i];
          }
          const float inv = static_cast<float>(1.0 / s);
          for (int64_t i = 0; i < n; ++i) dst[i] *= inv;
        }
        return out;
      },
      [](const Array& g, Inputs, const Array& y, GradSlots gs) {
        if (!gs[0]) return;
        const int64_t n = y.dim(-1), rows = rows_of(y);
        for (int64_t r = 0; r < rows; ++r) {
          const float* yr = y.data().data() + r * n;
          const float* gr = g.data().data() + r * n;
          float* dr = gs[0]->data().data() + r * n;
          double dot = 0.0;
          for (int64_t i = 0; i < n; ++i) dot += static_cast<double>(gr[i]) * yr[i];
          for (int64_t i = 0; i < n; ++i) dr[i] += yr[i] * (gr[i] - static_cast<float>(dot));
        }
      });
}

Var log_softmax(Var x) {
  Tape& t = tape_of({x});
  return t.apply(
      "log_softmax", {x},
      [](Inputs in) {
        const Array& a = *in[0];
        Array out(a.shape());
        const int64_t n = a.dim(-1), rows = rows_of(a);
        for (int64_t r = 0; r < rows; ++r) {
          const float* src = a.data().data() + r * n;
          float* dst = out.data().data() + r * n;
          const float mx = *std::max_element(src, src + n);
          double s = 0.0;
          for (int64_t i = 0; i < n; ++i) s += std::exp(static_cast<double>(src[i] - mx));
          const float lse = mx + static_cast<float>(std::log(s));
          for (int64_t i = 0; i < n; ++i) dst[i] = src[i] - lse;
        }
        return out;
      },
      [](const Array& g, Inputs, const Array& y, GradSlots gs) {
        if (!gs[0]) return;
        const int64_t n = y.dim(-1), rows = rows_of(y);
        for (int64_t r = 0; r < rows; ++r) {
          const float* yr = y.data().data() + r * n;
          const float* gr = g.data().data() + r * n;
          float* dr = gs[0]->data().data() + r * n;
          double gsum = 0.0;
          for (int64_t i = 0; i < n; ++i) gsum += gr[i];
          for (int64_t i = 0; i < n; ++i) dr[i] += gr[i] - std::exp(yr[i]) * static_cast<float>(gsum);
        }
      });
}

Var layernorm(Var x, float eps) {
  Tape& t = tape_of({x});
  return t.apply(
      "layernorm", {x},
      [eps](Inputs in) {
        const Array& a = *in[0];
        Array out(a.shape());
        const int64_t n = a.dim(-1), rows = rows_of(a);
        for (int64_t r = 0; r < rows; ++r) {
          const float* src = a.data().data() + r * n;
          float* dst = out.data().data() + r * n;
          double m = 0.0;
          for (int64_t i = 0; i < n; ++i) m += src[i];
          m /= static_cast<double>(n);
          double v = 0.0;
          for (int64_t i = 0; i < n; ++i) v += (src[i] - m) * (src[i] - m);
          v /= static_cast<double>(n);
          const double inv = 1.0 / std::sqrt(v + eps);
          for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>((src[i] - m) * inv);
        }
        return out;
      },
      [eps](const Array& g, Inputs in, const Array& y, GradSlots gs) {
        if (!gs[0]) return;
        const Array& a = *in[0];
        const int64_t n = a.dim(-1), rows = rows_of(a);
        for (int64_t r = 0; r < rows; ++r) {
          const float* src = a.data().data() + r * n;
          const float* yr = y.data().data() + r * n;
          const float* gr = g.data().data() + r * n;
          float* dr = gs[0]->data().data() + r * n;
          double m = 0.0;
          for (int64_t i = 0; i < n; ++i) m += src[i];
          m /= static_cast<double>(n);
          double v = 0.0;
          for (int64_t i = 0; i < n; ++i) v += (src[i] - m) * (src[i] - m);
          v /= static_cast<double>(n);
          const double inv = 1.0 / std::sqrt(v + eps);
          double gmean = 0.0, gy = 0.0;
          for (int64_t i = 0; i < n; ++i) {
            gmean += gr[i];
            gy += static_cast<double>(gr[i]) * yr[i];
          }
          gmean /= static_cast<double>(n);
          gy /= static_cast<double>(n);
          for (int64_t i = 0; i < n; ++i) {
            dr[i] += static_cast<float>(inv * (gr[i] - gmean - yr[i] * gy));
          }
        }
      });
}

Var normalize_rows(Var x, float eps) {
  Tape& t = tape_of({x});
  return t.apply(
      "normalize_rows", {x},
      [eps](Inputs in) {
        const Array& a = *in[0];
        Array out(a.shape());
        const int64_t n = a.dim(-1), rows = rows_of(a);
        for (int64_t r = 0; r < rows; ++r) {
          const float* src = a.data().data() + r * n;
          float* dst = out.data().data() + r * n;
          double s = 0.0;
          for (int64_t i = 0; i < n; ++i) s += static_cast<double>(src[i]) * src[i];
          const double inv = 1.0 / std::sqrt(s + static_cast<double>(eps) * eps);
          for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i] * inv);
        }
        return out;
      },
      [eps](const Array& g, Inputs in, const Array& y, GradSlots gs) {
        if (!gs[0]) return;
        const Array& a = *in[0];
        const int64_t n = a.dim(-1), rows = rows_of(a);
        for (int64_t r = 0; r < rows; ++r) {
          const float* src = a.data().data() + r * n;
          const float* yr = y.data().data() + r * n;
          const float* gr = g.data().data() + r * n;
          float* dr = gs[0]->data().data() + r * n;
          double s = 0.0, gy = 0.0;
          for (int64_t i = 0; i < n; ++i) {
            s += static_cast<double>(src[i]) * src[i];
            gy += static_cast<double>(gr[i]) * yr[i];
          }
          const double inv = 1.0 / std::sqrt(s + static_cast<double>(eps) * eps);
          for (int64_t i = 0; i < n; ++i) dr[i] += static_cast<float>(inv * (gr[i] - yr[i] * gy));
        }
      });
}

// ---- distances and reductions ----------------------------------------------

Var l1_distance(Var a, Var b) {
  Tape& t = tape_of({a, b});
  require(a.shape() == b.shape(), "l1_distance: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return t.apply(
      "l1_distance", {a, b},
      [](Inputs in) {
        const auto x = in[0]->data(), y = in[1]->data();
        double s = 0.0;
        for (size_t i = 0; i < x.size(); ++i) s += std::abs(static_cast<double>(x[i]) - y[i]);
        return Array::scalar(static_cast<float>(s / static_cast<double>(x.size())));
      },
      [](const Array& g, Inputs in, const Array&, GradSlots gs) {
        const auto x = in[0]->data(), y = in[1]->data();
        const float w = g[0] / static_cast<float>(x.size());
        for (size_t i = 0; i < x.size(); ++i) {
          const float d = x[i] > y[i] ? w : (x[i] < y[i] ? -w : 0.0f);
          if (gs[0]) gs[0]->data()[i] += d;
          if (gs[1]) gs[1]->data()[i] -= d;
        }
      });
}

Var squared_distance(Var a, Var b) {
  Tape& t = tape_of({a, b});
  require(a.shape() == b.shape(),
          "squared_distance: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return t.apply(
      "squared_distance", {a, b},
      [](Inputs in) {
        const auto x = in[0]->data(), y = in[1]->data();
        double s = 0.0;
        for (size_t i = 0; i < x.size(); ++i) {
          const double d = static_cast<double>(x[i]) - y[i];
          s += d * d;
        }
        return Array::scalar(static_cast<float>(s / static_cast<double>(x.size())));
      },
      [](const Array& g, Inputs in, const Array&, GradSlots gs) {
        const auto x = in[0]->data(), y = in[1]->data();
        const float w = 2.0f * g[0] / static_cast<float>(x.size());
        for (size_t i = 0; i < x.size(); ++i) {
          const float d = w * (x[i] - y[i]);
          if (gs[0]) gs[0]->data()[i] += d;
          if (gs[1]) gs[1]->data()[i] -= d;
        }
      });
}

Var sum(Var x) {
  Tape& t = tape_of({x});
  return t.apply(
      "sum", {x},
      [](Inputs in) {
        double s = 0.0;
        for (float v : in[0]->data()) s += v;
        return Array::scalar(static_cast<float>(s));
      },
      [](const Array& g, Inputs, const Array&, GradSlots gs) {
        if (!gs[0]) return;
        for (float& v : gs[0]->data()) v += g[0];
      });
}

Var mean(Var x) {
  Tape& t = tape_of({x});
  return t.apply(
      "mean", {x},
      [](Inputs in) {
        double s = 0.0;
        for (float v : in[0]->data()) s += v;
        return Array::scalar(static_cast<float>(s / static_cast<double>(in[0]->size())));
      },
      [](const Array& g, Inputs in, const Array&, GradSlots gs) {
        if (!gs[0]) return;
        const float w = g[0] / static_cast<float>(in[0]->size());
        for (float& v : gs[0]->data()) v += w;
      });
}

// ---- indexing and layout ----------------------------------------------------

Var embedding_gather(Var table, std::vector<int32_t> indices) {
  Tape& t = tape_of({table});
  require(table.shape().size() == 2, "embedding_gather table must be [K,D]");
  const int64_t K = table.shape()[0], D = table.shape()[1];
  for (int32_t i : indices) {
    if (i < 0 || i >= K) {
      throw ShapeError("embedding index " + std::to_string(i) + " out of range [0," +
                       std::to_string(K) + ")");
    }
  }
  const int64_t n = static_cast<int64_t>(indices.size());
  return t.apply(
      "embedding_gather", {table},
      [=](Inputs in) {
        Array out({n, D});
        const float* T = in[0]->data().data();
        float* O = out.data().data();
        for (int64_t r = 0; r < n; ++r) std::memcpy(O + r * D, T + indices[r] * D, sizeof(float) * D);
        return out;
      },
      [=](const Array& g, Inputs, const Array&, GradSlots gs) {
        if (!gs[0]) return;
        float* dT = gs[0]->data().data();
        const float* G = g.data().data();
        for (int64_t r = 0; r < n; ++r) {
          float* row = dT + indices[r] * D;
          for (int64_t d = 0; d < D; ++d) row[d] += G[r * D + d];
        }
      });
}

Var select_last(Var x, std::vector<int32_t> indices) {
  Tape& t = tape_of({x});
  require(x.shape().size() == 2 && x.shape()[0] == static_cast<int64_t>(indices.size()),
          "select_last: x " + shape_str(x.shape()) + " with " + std::to_string(indices.size()) +
              " indices");
  const int64_t M = x.shape()[0], K = x.shape()[1];
  for (int32_t i : indices) {
    if (i < 0 || i >= K) throw ShapeError("select_last index " + std::to_string(i) + " out of range");
  }
  return t.apply(
      "select_last", {x},
      [=](Inputs in) {
        Array out({M});
        for (int64_t m = 0; m < M; ++m) out[m] = (*in[0])[m * K + indices[m]];
        return out;
      },
      [=](const Array& g, Inputs, const Array&, GradSlots gs) {
        if (!gs[0]) return;
        for (int64_t m = 0; m < M; ++m) (*gs[0])[m * K + indices[m]] += g[m];
      });
}

Var concat(const std::vector<Var>& parts, int axis) {
  require(!parts.empty(), "concat of nothing");
  Tape& t = tape_of({parts[0]});
  const Shape base = parts[0].shape();
  const int r = static_cast<int>(base.size());
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, "concat axis out of range");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= base[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= base[static_cast<size_t>(i)];
  std::vector<int64_t> widths;
  Shape out_shape = base;
  out_shape[static_cast<size_t>(axis)] = 0;
  for (Var p : parts) {
    tape_of({parts[0], p});
    Shape s = p.shape();
    require(static_cast<int>(s.size()) == r, "concat rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis) require(s[static_cast<size_t>(i)] == base[static_cast<size_t>(i)], "concat shape mismatch");
    }
    widths.push_back(s[static_cast<size_t>(axis)] * inner);
    out_shape[static_cast<size_t>(axis)] += s[static_cast<size_t>(axis)];
  }
  const int64_t total = out_shape[static_cast<size_t>(axis)] * inner;
  return t.apply(
      "concat", parts,
      [=](Inputs in) {
        Array out(out_shape);
        float* O = out.data().data();
        int64_t off = 0;
        for (size_t p = 0; p < in.size(); ++p) {
          const float* src = in[p]->data().data();
          for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(O + o * total + off, src + o * widths[p], sizeof(float) * widths[p]);
          }
          off += widths[p];
        }
        return out;
      },
      [=](const Array& g, Inputs, const Array&, GradSlots gs) {
        const float* G = g.data().data();
        int64_t off = 0;
        for (size_t p = 0; p < gs.size(); ++p) {
          if (gs[p]) {
            float* dst = gs[p]->data().data();
            for (int64_t o = 0; o < outer; ++o) {
              for (int64_t i = 0; i < widths[p]; ++i) dst[o * widths[p] + i] += G[o * total + off + i];
            }
          }
          off += widths[p];
        }
      });
}

Var slice0(Var x, int64_t index) {
  Tape& t = tape_of({x});
  const Shape xs = x.shape();
  require(!xs.empty() && index >= 0 && index < xs[0], "slice0 index out of range");
  const Shape out_shape(xs.begin() + 1, xs.end());
  const int64_t n = numel(out_shape);
  return t.apply(
      "slice0", {x},
      [=](Inputs in) {
        const auto src = in[0]->data().subspan(static_cast<size_t>(index * n), static_cast<size_t>(n));
        return Array(out_shape, std::vector<float>(src.begin(), src.end()));
      },
      [=](const Array& g, Inputs, const Array&, GradSlots gs) {
        if (!gs[0]) return;
        float* dst = gs[0]->data().data() + index * n;
        for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
      });
}

Var reshape(Var x, Shape shape) {
  Tape& t = tape_of({x});
  require(numel(shape) == numel(x.shape()),
          "reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  return t.apply(
      "reshape", {x}, [shape](Inputs in) { return in[0]->reshape(shape); },
      [](const Array& g, Inputs, const Array&, GradSlots gs) {
        if (!gs[0]) return;
        auto d = gs[0]->data();
        for (size_t i = 0; i < d.size(); ++i) d[i] += g[static_cast<int64_t>(i)];
      });
}

Var permute(Var x, std::vector<int> perm) {
  Tape& t = tape_of({x});
  const Shape xs = x.shape();
  const size_t r = xs.size();
  require(perm.size() == r, "permute rank mismatch");
  std::vector<bool> seen(r, false);
  for (int p : perm) {
    require(p >= 0 && static_cast<size_t>(p) < r && !seen[static_cast<size_t>(p)], "invalid permutation");
    seen[static_cast<size_t>(p)] = true;
  }
  Shape out_shape(r);
  std::vector<int64_t> in_strides(r), src_stride(r);
  int64_t s = 1;
  for (size_t i = r; i-- > 0;) {
    in_strides[i] = s;
    s *= xs[i];
  }
  for (size_t i = 0; i < r; ++i) {
    out_shape[i] = xs[static_cast<size_t>(perm[i])];
    src_stride[i] = in_strides[static_cast<size_t>(perm[i])];
  }
  // Visits output elements in order, yielding the matching input offset.
  auto walk = [out_shape, src_stride, r](auto&& f) {
    const int64_t n = numel(out_shape);
    std::vector<int64_t> idx(r, 0);
    int64_t off = 0;
    for (int64_t i = 0; i < n; ++i) {
      f(i, off);
      for (size_t d = r; d-- > 0;) {
        ++idx[d];
        off += src_stride[d];
        if (idx[d] < out_shape[d]) break;
        off -= src_stride[d] * idx[d];
        idx[d] = 0;
      }
    }
  };
  return t.apply(
      "permute", {x},
      [=](Inputs in) {
        Array out(out_shape);
        const auto src = in[0]->data();
        auto dst = out.data();
        walk([&](int64_t i, int64_t off) { dst[static_cast<size_t>(i)] = src[static_cast<size_t>(off)]; });
        return out;
      },
      [=](const Array& g, Inputs, const Array&, GradSlots gs) {
        if (!gs[0]) return;
        auto dst = gs[0]->data();
        const auto gd = g.data();
        walk([&](int64_t i, int64_t off) { dst[static_cast<size_t>(off)] += gd[static_cast<size_t>(i)]; });
      });
}

Var stop_gradient(Var x) {
  Tape& t = tape_of({x});
  return t.apply("stop_gradient", {x}, [](Inputs in) { return *in[0]; }, nullptr);
}

Var straight_through(Var encoded, Var quantized) {
  Tape& t = tape_of({encoded, quantized});
  require(encoded.shape() == quantized.shape(),
          "straight_through: " + shape_str(encoded.shape()) + " vs " + shape_str(quantized.shape()));
  return t.apply(
      "straight_through", {encoded, quantized}, [](Inputs in) { return *in[1]; },
      [](const Array& g, Inputs, const Array&, GradSlots gs) {
        if (!gs[0]) return;
        auto d = gs[0]->data();
        for (size_t i = 0; i < d.size(); ++i) d[i] += g[static_cast<int64_t>(i)];
      });
}

Var unfold_patches(Var x, int k) {
  Tape& t = tape_of({x});
  const Shape xs = x.shape();
  require(xs.size() == 3, "unfold_patches expects [C,H,W], got " + shape_str(xs));
  require(k >= 1 && k % 2 == 1, "unfold_patches needs an odd patch size");
  const ConvGeom geo{xs[0], xs[1], xs[2], k, 1, k / 2, xs[1], xs[2]};
  const int64_t ckk = geo.C * k * k, hw = geo.H * geo.W;
  return t.apply(
      "unfold_patches", {x},
      [=](Inputs in) {
        std::vector<float> col(static_cast<size_t>(ckk * hw));
        im2col(geo, in[0]->data().data(), col.data());
        Array out({hw, ckk});
        detail::transpose(ckk, hw, col.data(), out.data().data());
        return out;
      },
      [=](const Array& g, Inputs, const Array&, GradSlots gs) {
        if (!gs[0]) return;
        std::vector<float> col(static_cast<size_t>(ckk * hw));
        detail::transpose(hw, ckk, g.data().data(), col.data());
        col2im_add(geo, col.data(), gs[0]->data().data());
      });
}

}  // namespace pluralfill
