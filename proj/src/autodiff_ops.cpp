#include <algorithm>
#include <cmath>

#include "gemm.hpp"
#include "hyperdys/autodiff.hpp"

namespace hyperdys::ad {

namespace {

using detail::gemm;

int as_int(std::size_t v) { return static_cast<int>(v); }

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Unfolds one [c,h,w] image into a [c*kh*kw, oh*ow] patch matrix.
template <typename T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow,
            T* col) {
  const std::size_t cols = oh * ow;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((ch * kh + ki) * kw + kj) * cols;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          T* out = row + oy * ow;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(out, out + ow, T{0});
            continue;
          }
          const T* src = img + (ch * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            out[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters patch gradients back onto the image.
template <typename T>
void col2im(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow,
            T* img) {
  const std::size_t cols = oh * ow;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((ch * kh + ki) * kw + kj) * cols;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = img + (ch * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace

template <typename T>
NodeId linear(Graph<T>& g, NodeId x, NodeId w, NodeId b) {
  const Tensor<T>& X = g.value(x);
  const Tensor<T>& W = g.value(w);
  const Tensor<T>& B = g.value(b);
  require(X.rank() == 2 && W.rank() == 2, "linear: expected 2-D input and weight, got " +
                                              to_string(X.shape()) + " and " + to_string(W.shape()));
  require(X.dim(1) == W.dim(0), "linear: inner dimensions disagree: " + to_string(X.shape()) +
                                    " x " + to_string(W.shape()));
  require(B.size() == W.dim(1), "linear: bias length " + std::to_string(B.size()) +
                                    " does not match output width " + std::to_string(W.dim(1)));
  const std::size_t n = X.dim(0), in = W.dim(0), out = W.dim(1);
  Tensor<T> Y({n, out});
  for (std::size_t i = 0; i < n; ++i) std::copy(B.raw(), B.raw() + out, Y.raw() + i * out);
  gemm(false, false, as_int(n), as_int(out), as_int(in), T{1}, X.raw(), as_int(in), W.raw(),
       as_int(out), T{1}, Y.raw(), as_int(out));
  return g.record(std::move(Y), {x, w, b}, [x, w, b, n, in, out](Graph<T>& g, NodeId self) {
    const Tensor<T>& dY = g.grad_buffer(self);
    if (g.requires_grad(x)) {
      gemm(false, true, as_int(n), as_int(in), as_int(out), T{1}, dY.raw(), as_int(out),
           g.value(w).raw(), as_int(out), T{1}, g.grad_buffer(x).raw(), as_int(in));
    }
    if (g.requires_grad(w)) {
      gemm(true, false, as_int(in), as_int(out), as_int(n), T{1}, g.value(x).raw(), as_int(in),
           dY.raw(), as_int(out), T{1}, g.grad_buffer(w).raw(), as_int(out));
    }
    if (g.requires_grad(b)) {
      Tensor<T>& dB = g.grad_buffer(b);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < out; ++j) dB[j] += dY(i, j);
    }
  });
}

template <typename T>
NodeId matmul(Graph<T>& g, NodeId a, NodeId b) {
  const Tensor<T>& A = g.value(a);
  const Tensor<T>& B = g.value(b);
  require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(0),
          "matmul: incompatible shapes " + to_string(A.shape()) + " x " + to_string(B.shape()));
  const std::size_t n = A.dim(0), k = A.dim(1), m = B.dim(1);
  Tensor<T> Y({n, m});
  gemm(false, false, as_int(n), as_int(m), as_int(k), T{1}, A.raw(), as_int(k), B.raw(), as_int(m),
       T{0}, Y.raw(), as_int(m));
  return g.record(std::move(Y), {a, b}, [a, b, n, k, m](Graph<T>& g, NodeId self) {
    const Tensor<T>& dY = g.grad_buffer(self);
    if (g.requires_grad(a)) {
      gemm(false, true, as_int(n), as_int(k), as_int(m), T{1}, dY.raw(), as_int(m),
           g.value(b).raw(), as_int(m), T{1}, g.grad_buffer(a).raw(), as_int(k));
    }
    if (g.requires_grad(b)) {
      gemm(true, false, as_int(k), as_int(m), as_int(n), T{1}, g.value(a).raw(), as_int(k),
           dY.raw(), as_int(m), T{1}, g.grad_buffer(b).raw(), as_int(m));
    }
  });
}

template <typename T>
NodeId conv2d(Graph<T>& g, NodeId x, NodeId k, NodeId b, Conv2dOptions opts) {
  const Tensor<T>& X = g.value(x);
  const Tensor<T>& K = g.value(k);
  const Tensor<T>& B = g.value(b);
  require(X.rank() == 4 && K.rank() == 4, "conv2d: expected 4-D input and kernel, got " +
                                              to_string(X.shape()) + " and " + to_string(K.shape()));
  require(X.dim(1) == K.dim(1), "conv2d: input channels " + std::to_string(X.dim(1)) +
                                    " do not match kernel " + to_string(K.shape()));
  require(B.size() == K.dim(0), "conv2d: bias length does not match output channels");
  if (opts.stride == 0) throw ParameterError("conv2d: stride must be positive");
  const std::size_t n = X.dim(0), c = X.dim(1), h = X.dim(2), w = X.dim(3);
  const std::size_t oc = K.dim(0), kh = K.dim(2), kw = K.dim(3);
  const std::size_t s = opts.stride, p = opts.pad;
  require(kh <= h + 2 * p && kw <= w + 2 * p,
          "conv2d: kernel " + to_string(K.shape()) + " larger than padded input " +
              to_string(X.shape()));
  const std::size_t oh = (h + 2 * p - kh) / s + 1;
  const std::size_t ow = (w + 2 * p - kw) / s + 1;
  const std::size_t patch = c * kh * kw, cols = oh * ow;

  Tensor<T> Y({n, oc, oh, ow});
  std::vector<T> col(patch * cols);
  for (std::size_t i = 0; i < n; ++i) {
    im2col(X.raw() + i * c * h * w, c, h, w, kh, kw, s, p, oh, ow, col.data());
    T* y = Y.raw() + i * oc * cols;
    for (std::size_t o = 0; o < oc; ++o) std::fill(y + o * cols, y + (o + 1) * cols, B[o]);
    gemm(false, false, as_int(oc), as_int(cols), as_int(patch), T{1}, K.raw(), as_int(patch),
         col.data(), as_int(cols), T{1}, y, as_int(cols));
  }
  return g.record(std::move(Y), {x, k, b},
                  [=](Graph<T>& g, NodeId self) {
                    const Tensor<T>& dY = g.grad_buffer(self);
                    const bool need_x = g.requires_grad(x);
                    const bool need_k = g.requires_grad(k);
                    std::vector<T> col(patch * cols);
                    for (std::size_t i = 0; i < n; ++i) {
                      const T* dy = dY.raw() + i * oc * cols;
                      if (need_k) {
                        im2col(g.value(x).raw() + i * c * h * w, c, h, w, kh, kw, s, p, oh, ow,
                               col.data());
                        gemm(false, true, as_int(oc), as_int(patch), as_int(cols), T{1}, dy,
                             as_int(cols), col.data(), as_int(cols), T{1},
                             g.grad_buffer(k).raw(), as_int(patch));
                      }
                      if (need_x) {
                        gemm(true, false, as_int(patch), as_int(cols), as_int(oc), T{1},
                             g.value(k).raw(), as_int(patch), dy, as_int(cols), T{0}, col.data(),
                             as_int(cols));
                        col2im(col.data(), c, h, w, kh, kw, s, p, oh, ow,
                               g.grad_buffer(x).raw() + i * c * h * w);
                      }
                    }
                    if (g.requires_grad(b)) {
                      Tensor<T>& dB = g.grad_buffer(b);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t o = 0; o < oc; ++o) {
                          const T* dy = dY.raw() + (i * oc + o) * cols;
                          T acc{0};
                          for (std::size_t q = 0; q < cols; ++q) acc += dy[q];
                          dB[o] += acc;
                        }
                    }
                  });
}

template <typename T>
NodeId maxpool2d(Graph<T>& g, NodeId x, std::size_t kernel, std::size_t stride) {
  const Tensor<T>& X = g.value(x);
  require(X.rank() == 4, "maxpool2d: expected 4-D input, got " + to_string(X.shape()));
  if (kernel == 0 || stride == 0) throw ParameterError("maxpool2d: kernel and stride must be positive");
  const std::size_t n = X.dim(0), c = X.dim(1), h = X.dim(2), w = X.dim(3);
  require(kernel <= h && kernel <= w, "maxpool2d: window " + std::to_string(kernel) +
                                          " exceeds input " + to_string(X.shape()));
  const std::size_t oh = (h - kernel) / stride + 1;
  const std::size_t ow = (w - kernel) / stride + 1;
  Tensor<T> Y({n, c, oh, ow});
  std::vector<std::size_t> argmax(Y.size());
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        std::size_t best = base + oy * stride * w + ox * stride;
        for (std::size_t ki = 0; ki < kernel; ++ki) {
          for (std::size_t kj = 0; kj < kernel; ++kj) {
            const std::size_t idx = base + (oy * stride + ki) * w + ox * stride + kj;
            if (X[idx] > X[best]) best = idx;
          }
        }
        argmax[o] = best;
        Y[o] = X[best];
      }
    }
  }
  return g.record(std::move(Y), {x},
                  [x, argmax = std::move(argmax)](Graph<T>& g, NodeId self) {
                    const Tensor<T>& dY = g.grad_buffer(self);
                    Tensor<T>& dX = g.grad_buffer(x);
                    for (std::size_t i = 0; i < argmax.size(); ++i) dX[argmax[i]] += dY[i];
                  });
}

template <typename T>
NodeId activation(Graph<T>& g, NodeId x, Activation kind) {
  Tensor<T> Y = g.value(x);
  for (T& v : Y.data()) {
    switch (kind) {
      case Activation::relu: v = v > T{0} ? v : T{0}; break;
      case Activation::tanh: v = std::tanh(v); break;
      case Activation::sigmoid: v = stable_sigmoid(v); break;
    }
  }
  return g.record(std::move(Y), {x}, [x, kind](Graph<T>& g, NodeId self) {
    const Tensor<T>& dY = g.grad_buffer(self);
    const Tensor<T>& Yv = g.value(self);
    Tensor<T>& dX = g.grad_buffer(x);
    for (std::size_t i = 0; i < dX.size(); ++i) {
      const T y = Yv[i];
      switch (kind) {
        case Activation::relu: dX[i] += y > T{0} ? dY[i] : T{0}; break;
        case Activation::tanh: dX[i] += dY[i] * (T{1} - y * y); break;
        case Activation::sigmoid: dX[i] += dY[i] * y * (T{1} - y); break;
      }
    }
  });
}

template <typename T>
NodeId dropout(Graph<T>& g, NodeId x, double rate, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout rate must lie in [0,1)");
  const Tensor<T>& X = g.value(x);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<T> mask(X.size());
  for (T& m : mask) m = keep(rng) ? scale : T{0};
  Tensor<T> Y = X;
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] *= mask[i];
  return g.record(std::move(Y), {x}, [x, mask = std::move(mask)](Graph<T>& g, NodeId self) {
    const Tensor<T>& dY = g.grad_buffer(self);
    Tensor<T>& dX = g.grad_buffer(x);
    for (std::size_t i = 0; i < mask.size(); ++i) dX[i] += dY[i] * mask[i];
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  require(logits.rank() == 2, "softmax_rows: expected 2-D logits");
  Tensor<T> out = logits;
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    T mx = logits(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits(i, j));
    T sum{0};
    for (std::size_t j = 0; j < k; ++j) {
      out(i, j) = std::exp(logits(i, j) - mx);
      sum += out(i, j);
    }
    for (std::size_t j = 0; j < k; ++j) out(i, j) /= sum;
  }
  return out;
}

template <typename T>
NodeId softmax_cross_entropy(Graph<T>& g, NodeId logits, std::span<const int> labels) {
  const Tensor<T>& Z = g.value(logits);
  require(Z.rank() == 2, "softmax_cross_entropy: expected [n,k] logits, got " + to_string(Z.shape()));
  const std::size_t n = Z.dim(0), k = Z.dim(1);
  require(labels.size() == n, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                                  " labels for " + std::to_string(n) + " rows");
  if (n == 0) throw ParameterError("softmax_cross_entropy: empty batch");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw LabelError("label " + std::to_string(l) + " outside [0," + std::to_string(k) + ")");
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = Z(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(Z(i, j)));
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(Z(i, j) - mx);
    total += mx + std::log(sum) - Z(i, static_cast<std::size_t>(labels[i]));
  }
  Tensor<T> L({1}, static_cast<T>(total / static_cast<double>(n)));
  std::vector<int> owned(labels.begin(), labels.end());
  return g.record(std::move(L), {logits},
                  [logits, owned = std::move(owned), n, k](Graph<T>& g, NodeId self) {
                    const T scale = g.grad_buffer(self)[0] / static_cast<T>(n);
                    Tensor<T> P = softmax_rows(g.value(logits));
                    Tensor<T>& dZ = g.grad_buffer(logits);
                    for (std::size_t i = 0; i < n; ++i) {
                      for (std::size_t j = 0; j < k; ++j) {
                        const T onehot = static_cast<std::size_t>(owned[i]) == j ? T{1} : T{0};
                        dZ(i, j) += scale * (P(i, j) - onehot);
                      }
                    }
                  });
}

namespace {

enum class Binary { add, sub, mul };

template <typename T>
NodeId binary(Graph<T>& g, NodeId a, NodeId b, Binary op) {
  const Tensor<T>& A = g.value(a);
  const Tensor<T>& B = g.value(b);
  require(A.shape() == B.shape(), "elementwise op on mismatched shapes " + to_string(A.shape()) +
                                      " and " + to_string(B.shape()));
  Tensor<T> Y(A.shape());
  for (std::size_t i = 0; i < Y.size(); ++i) {
    switch (op) {
      case Binary::add: Y[i] = A[i] + B[i]; break;
      case Binary::sub: Y[i] = A[i] - B[i]; break;
      case Binary::mul: Y[i] = A[i] * B[i]; break;
    }
  }
  return g.record(std::move(Y), {a, b}, [a, b, op](Graph<T>& g, NodeId self) {
    const Tensor<T>& dY = g.grad_buffer(self);
    if (g.requires_grad(a)) {
      Tensor<T>& dA = g.grad_buffer(a);
      for (std::size_t i = 0; i < dA.size(); ++i)
        dA[i] += op == Binary::mul ? dY[i] * g.value(b)[i] : dY[i];
    }
    if (g.requires_grad(b)) {
      Tensor<T>& dB = g.grad_buffer(b);
      for (std::size_t i = 0; i < dB.size(); ++i) {
        switch (op) {
          case Binary::add: dB[i] += dY[i]; break;
          case Binary::sub: dB[i] -= dY[i]; break;
          case Binary::mul: dB[i] += dY[i] * g.value(a)[i]; break;
        }
      }
    }
  });
}

}  // namespace

template <typename T>
NodeId add(Graph<T>& g, NodeId a, NodeId b) {
  return binary(g, a, b, Binary::add);
}
template <typename T>
NodeId sub(Graph<T>& g, NodeId a, NodeId b) {
  return binary(g, a, b, Binary::sub);
}
template <typename T>
NodeId mul(Graph<T>& g, NodeId a, NodeId b) {
  return binary(g, a, b, Binary::mul);
}

template <typename T>
NodeId reshape(Graph<T>& g, NodeId x, Shape shape) {
  Tensor<T> Y = g.value(x).reshaped(std::move(shape));
  return g.record(std::move(Y), {x}, [x](Graph<T>& g, NodeId self) {
    const Tensor<T>& dY = g.grad_buffer(self);
    Tensor<T>& dX = g.grad_buffer(x);
    for (std::size_t i = 0; i < dX.size(); ++i) dX[i] += dY[i];
  });
}

template <typename T>
NodeId concat_cols(Graph<T>& g, const std::vector<NodeId>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t n = g.value(parts[0]).rank() == 2 ? g.value(parts[0]).dim(0) : 0;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (NodeId p : parts) {
    const Tensor<T>& P = g.value(p);
    require(P.rank() == 2 && P.dim(0) == n,
            "concat_cols: expected 2-D inputs with " + std::to_string(n) + " rows, got " +
                to_string(P.shape()));
    widths.push_back(P.dim(1));
    total += P.dim(1);
  }
  Tensor<T> Y({n, total});
  std::size_t offset = 0;
  for (std::size_t idx = 0; idx < parts.size(); ++idx) {
    const Tensor<T>& P = g.value(parts[idx]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < widths[idx]; ++j) Y(i, offset + j) = P(i, j);
    offset += widths[idx];
  }
  return g.record(std::move(Y), parts, [parts, widths, n, total](Graph<T>& g, NodeId self) {
    const Tensor<T>& dY = g.grad_buffer(self);
    std::size_t offset = 0;
    for (std::size_t idx = 0; idx < parts.size(); ++idx) {
      if (g.requires_grad(parts[idx])) {
        Tensor<T>& dP = g.grad_buffer(parts[idx]);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < widths[idx]; ++j) dP(i, j) += dY(i, offset + j);
      }
      offset += widths[idx];
    }
    (void)total;
  });
}

template <typename T>
NodeId slice_cols(Graph<T>& g, NodeId x, std::size_t begin, std::size_t end) {
  const Tensor<T>& X = g.value(x);
  require(X.rank() == 2 && begin < end && end <= X.dim(1),
          "slice_cols: invalid range [" + std::to_string(begin) + "," + std::to_string(end) +
              ") for " + to_string(X.shape()));
  const std::size_t n = X.dim(0), w = end - begin;
  Tensor<T> Y({n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) Y(i, j) = X(i, begin + j);
  return g.record(std::move(Y), {x}, [x, begin, n, w](Graph<T>& g, NodeId self) {
    const Tensor<T>& dY = g.grad_buffer(self);
    Tensor<T>& dX = g.grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) dX(i, begin + j) += dY(i, j);
  });
}

template <typename T>
NodeId slice_rows(Graph<T>& g, NodeId x, std::size_t begin, std::size_t end) {
  const Tensor<T>& X = g.value(x);
  require(X.rank() >= 1 && begin < end && end <= X.dim(0),
          "slice_rows: invalid range [" + std::to_string(begin) + "," + std::to_string(end) +
              ") for " + to_string(X.shape()));
  const std::size_t stride = X.size() / X.dim(0);
  Shape shape = X.shape();
  shape[0] = end - begin;
  std::vector<T> data(X.raw() + begin * stride, X.raw() + end * stride);
  Tensor<T> Y(std::move(shape), std::move(data));
  return g.record(std::move(Y), {x}, [x, begin, stride](Graph<T>& g, NodeId self) {
    const Tensor<T>& dY = g.grad_buffer(self);
    Tensor<T>& dX = g.grad_buffer(x);
    T* dst = dX.raw() + begin * stride;
    for (std::size_t i = 0; i < dY.size(); ++i) dst[i] += dY[i];
  });
}

template <typename T>
NodeId generated_linear(Graph<T>& g, NodeId x, NodeId theta, std::size_t outputs) {
  const Tensor<T>& X = g.value(x);
  const Tensor<T>& P = g.value(theta);
  require(X.rank() == 2, "generated_linear: expected [n,d] input, got " + to_string(X.shape()));
  const std::size_t n = X.dim(0), d = X.dim(1), k = outputs;
  require(P.rank() == 2 && P.dim(1) == d * k + k && (P.dim(0) == 1 || P.dim(0) == n),
          "generated_linear: parameter block " + to_string(P.shape()) + " incompatible with input " +
              to_string(X.shape()) + " and " + std::to_string(k) + " outputs");
  const bool shared = P.dim(0) == 1;
  Tensor<T> Y({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    const T* th = P.raw() + (shared ? 0 : i) * (d * k + k);
    for (std::size_t j = 0; j < k; ++j) {
      T acc = th[d * k + j];
      for (std::size_t a = 0; a < d; ++a) acc += X(i, a) * th[a * k + j];
      Y(i, j) = acc;
    }
  }
  return g.record(std::move(Y), {x, theta}, [x, theta, n, d, k, shared](Graph<T>& g, NodeId self) {
    const Tensor<T>& dY = g.grad_buffer(self);
    const Tensor<T>& X = g.value(x);
    const Tensor<T>& P = g.value(theta);
    if (g.requires_grad(x)) {
      Tensor<T>& dX = g.grad_buffer(x);
      for (std::size_t i = 0; i < n; ++i) {
        const T* th = P.raw() + (shared ? 0 : i) * (d * k + k);
        for (std::size_t a = 0; a < d; ++a) {
          T acc{0};
          for (std::size_t j = 0; j < k; ++j) acc += dY(i, j) * th[a * k + j];
          dX(i, a) += acc;
        }
      }
    }
    if (g.requires_grad(theta)) {
      Tensor<T>& dP = g.grad_buffer(theta);
      for (std::size_t i = 0; i < n; ++i) {
        T* dth = dP.raw() + (shared ? 0 : i) * (d * k + k);
        for (std::size_t a = 0; a < d; ++a)
          for (std::size_t j = 0; j < k; ++j) dth[a * k + j] += X(i, a) * dY(i, j);
        for (std::size_t j = 0; j < k; ++j) dth[d * k + j] += dY(i, j);
      }
    }
  });
}

#define HYPERDYS_INSTANTIATE(T)                                                               \
  template NodeId linear<T>(Graph<T>&, NodeId, NodeId, NodeId);                               \
  template NodeId matmul<T>(Graph<T>&, NodeId, NodeId);                                       \
  template NodeId conv2d<T>(Graph<T>&, NodeId, NodeId, NodeId, Conv2dOptions);                \
  template NodeId maxpool2d<T>(Graph<T>&, NodeId, std::size_t, std::size_t);                  \
  template NodeId activation<T>(Graph<T>&, NodeId, Activation);                               \
  template NodeId dropout<T>(Graph<T>&, NodeId, double, std::mt19937_64&);                    \
  template NodeId softmax_cross_entropy<T>(Graph<T>&, NodeId, std::span<const int>);          \
  template NodeId add<T>(Graph<T>&, NodeId, NodeId);                                          \
  template NodeId sub<T>(Graph<T>&, NodeId, NodeId);                                          \
  template NodeId mul<T>(Graph<T>&, NodeId, NodeId);                                          \
  template NodeId reshape<T>(Graph<T>&, NodeId, Shape);                                       \
  template NodeId concat_cols<T>(Graph<T>&, const std::vector<NodeId>&);                      \
  template NodeId slice_cols<T>(Graph<T>&, NodeId, std::size_t, std::size_t);                 \
  template NodeId slice_rows<T>(Graph<T>&, NodeId, std::size_t, std::size_t);                 \
  template NodeId generated_linear<T>(Graph<T>&, NodeId, NodeId, std::size_t);                \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);

HYPERDYS_INSTANTIATE(float)
HYPERDYS_INSTANTIATE(double)

#undef HYPERDYS_INSTANTIATE

}  // namespace hyperdys::ad
