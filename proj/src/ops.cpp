#include "mmhdit/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "mmhdit/errors.hpp"

namespace mmh {

namespace {

// Shape bookkeeping for a broadcast binary op. Common layouts get fast paths.
struct Broadcast {
    enum class Kind { same, b_suffix, a_suffix, general };
    Kind kind = Kind::general;
    Shape out;
    std::vector<std::int64_t> stride_a, stride_b;
    std::int64_t n = 0, na = 0, nb = 0;

    template <class F>
    void for_each(F&& f) const {
        switch (kind) {
            case Kind::same:
                for (std::int64_t i = 0; i < n; ++i) f(i, i, i);
                return;
            case Kind::b_suffix:
                for (std::int64_t i = 0; i < n; ++i) f(i, i, i % nb);
                return;
            case Kind::a_suffix:
                for (std::int64_t i = 0; i < n; ++i) f(i, i % na, i);
                return;
            case Kind::general: break;
        }
        const auto rank = out.size();
        std::vector<std::int64_t> idx(rank, 0);
        std::int64_t ia = 0, ib = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            f(i, ia, ib);
            for (auto d = static_cast<std::ptrdiff_t>(rank) - 1; d >= 0; --d) {
                auto ud = static_cast<std::size_t>(d);
                ++idx[ud];
                ia += stride_a[ud];
                ib += stride_b[ud];
                if (idx[ud] < out[ud]) break;
                ia -= stride_a[ud] * idx[ud];
                ib -= stride_b[ud] * idx[ud];
                idx[ud] = 0;
            }
        }
    }
};

Shape strip_leading_ones(const Shape& s) {
    auto it = std::find_if(s.begin(), s.end(), [](auto d) { return d != 1; });
    return Shape(it, s.end());
}

bool is_suffix(const Shape& small, const Shape& big) {
    auto s = strip_leading_ones(small);
    if (s.size() > big.size()) return false;
    return std::equal(s.begin(), s.end(), big.end() - static_cast<std::ptrdiff_t>(s.size()));
}

std::vector<std::int64_t> aligned_strides(const Shape& in, const Shape& out) {
    std::vector<std::int64_t> strides(out.size(), 0);
    std::int64_t stride = 1;
    auto offset = out.size() - in.size();
    for (auto d = static_cast<std::ptrdiff_t>(in.size()) - 1; d >= 0; --d) {
        auto ud = static_cast<std::size_t>(d);
        strides[ud + offset] = in[ud] == 1 ? 0 : stride;
        stride *= in[ud];
    }
    return strides;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
    Broadcast p;
    auto rank = std::max(a.size(), b.size());
    p.out.assign(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
        }
        p.out[i] = da == 1 ? db : da;
    }
    p.n = shape_numel(p.out);
    p.na = shape_numel(a);
    p.nb = shape_numel(b);
    if (a == b) {
        p.kind = Broadcast::Kind::same;
    } else if (p.na == p.n && is_suffix(b, p.out)) {
        p.kind = Broadcast::Kind::b_suffix;
    } else if (p.nb == p.n && is_suffix(a, p.out)) {
        p.kind = Broadcast::Kind::a_suffix;
    } else {
        p.stride_a = aligned_strides(a, p.out);
        p.stride_b = aligned_strides(b, p.out);
    }
    return p;
}

template <class T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha, const T* a,
          std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c, std::int64_t ldc) {
    if (m == 0 || n == 0) return;
    auto ta = trans_a ? CblasTrans : CblasNoTrans;
    auto tb = trans_b ? CblasTrans : CblasNoTrans;
    if constexpr (std::is_same_v<T, float>) {
        cblas_sgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                    static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
    } else {
        cblas_dgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                    static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
    }
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    auto p = plan_broadcast(a.shape(), b.shape());
    std::vector<T> out(static_cast<std::size_t>(p.n));
    auto da = a.data();
    auto db = b.data();
    p.for_each([&](auto i, auto ia, auto ib) { out[i] = da[ia] + db[ib]; });
    return detail::make_result<T>(p.out, std::move(out), {a, b}, "add", [p](Node<T>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        const auto& g = self.grad;
        if (na.requires_grad) {
            auto ga = Node<T>::grad_of(na);
            p.for_each([&](auto i, auto ia, auto) { ga[ia] += g[i]; });
        }
        if (nb.requires_grad) {
            auto gb = Node<T>::grad_of(nb);
            p.for_each([&](auto i, auto, auto ib) { gb[ib] += g[i]; });
        }
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    auto p = plan_broadcast(a.shape(), b.shape());
    std::vector<T> out(static_cast<std::size_t>(p.n));
    auto da = a.data();
    auto db = b.data();
    p.for_each([&](auto i, auto ia, auto ib) { out[i] = da[ia] - db[ib]; });
    return detail::make_result<T>(p.out, std::move(out), {a, b}, "sub", [p](Node<T>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        const auto& g = self.grad;
        if (na.requires_grad) {
            auto ga = Node<T>::grad_of(na);
            p.for_each([&](auto i, auto ia, auto) { ga[ia] += g[i]; });
        }
        if (nb.requires_grad) {
            auto gb = Node<T>::grad_of(nb);
            p.for_each([&](auto i, auto, auto ib) { gb[ib] -= g[i]; });
        }
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    auto p = plan_broadcast(a.shape(), b.shape());
    std::vector<T> out(static_cast<std::size_t>(p.n));
    auto da = a.data();
    auto db = b.data();
    p.for_each([&](auto i, auto ia, auto ib) { out[i] = da[ia] * db[ib]; });
    return detail::make_result<T>(p.out, std::move(out), {a, b}, "mul", [p](Node<T>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        const auto& g = self.grad;
        if (na.requires_grad) {
            auto ga = Node<T>::grad_of(na);
            p.for_each([&](auto i, auto ia, auto ib) { ga[ia] += g[i] * nb.data[ib]; });
        }
        if (nb.requires_grad) {
            auto gb = Node<T>::grad_of(nb);
            p.for_each([&](auto i, auto ia, auto ib) { gb[ib] += g[i] * na.data[ia]; });
        }
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= factor;
    return detail::make_result<T>(a.shape(), std::move(out), {a}, "scale", [factor](Node<T>& self) {
        auto ga = Node<T>::grad_of(*self.inputs[0]);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * factor;
    });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v += value;
    return detail::make_result<T>(a.shape(), std::move(out), {a}, "add_scalar", [](Node<T>& self) {
        auto ga = Node<T>::grad_of(*self.inputs[0]);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
}

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
    auto x = a.data();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * sigmoid(x[i]);
    return detail::make_result<T>(a.shape(), std::move(out), {a}, "silu", [](Node<T>& self) {
        auto& in = *self.inputs[0];
        auto ga = Node<T>::grad_of(in);
        for (std::size_t i = 0; i < ga.size(); ++i) {
            T s = sigmoid(in.data[i]);
            ga[i] += self.grad[i] * s * (T(1) + in.data[i] * (T(1) - s));
        }
    });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
    auto x = a.data();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * x[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a}, "square", [](Node<T>& self) {
        auto& in = *self.inputs[0];
        auto ga = Node<T>::grad_of(in);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * T(2) * in.data[i];
    });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = 0;
    for (auto v : a.data()) acc += v;
    return detail::make_result<T>({}, {acc}, {a}, "sum", [](Node<T>& self) {
        auto ga = Node<T>::grad_of(*self.inputs[0]);
        for (auto& g : ga) g += self.grad[0];
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
    T acc = 0;
    for (auto v : a.data()) acc += v;
    const T inv = T(1) / static_cast<T>(a.numel());
    return detail::make_result<T>({}, {acc * inv}, {a}, "mean", [inv](Node<T>& self) {
        auto ga = Node<T>::grad_of(*self.inputs[0]);
        for (auto& g : ga) g += self.grad[0] * inv;
    });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() < 2 || b.ndim() < 2) {
        throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const auto m = a.size(-2), k = a.size(-1), n = b.size(-1);
    if (b.size(-2) != k) {
        throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    Shape batch_b(b.shape().begin(), b.shape().end() - 2);

    if (batch_b.empty() || shape_numel(batch_b) == 1) {
        // Weight-style product: fold every batch row of `a` into one GEMM.
        const auto rows = shape_numel(batch_a) * m;
        Shape out_shape = batch_a;
        if (batch_a.size() < batch_b.size()) out_shape = batch_b;
        out_shape.push_back(m);
        out_shape.push_back(n);
        std::vector<T> out(static_cast<std::size_t>(rows * n));
        gemm<T>(false, false, rows, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0), out.data(), n);
        return detail::make_result<T>(out_shape, std::move(out), {a, b}, "matmul",
                                      [rows, n, k](Node<T>& self) {
                                          auto& na = *self.inputs[0];
                                          auto& nb = *self.inputs[1];
                                          if (na.requires_grad) {
                                              auto ga = Node<T>::grad_of(na);
                                              gemm<T>(false, true, rows, k, n, T(1), self.grad.data(), n,
                                                      nb.data.data(), n, T(1), ga.data(), k);
                                          }
                                          if (nb.requires_grad) {
                                              auto gb = Node<T>::grad_of(nb);
                                              gemm<T>(true, false, k, n, rows, T(1), na.data.data(), k,
                                                      self.grad.data(), n, T(1), gb.data(), n);
                                          }
                                      });
    }

    auto p = plan_broadcast(batch_a, batch_b);
    const auto sa = m * k, sb = k * n, so = m * n;
    std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
    pairs.reserve(static_cast<std::size_t>(p.n));
    p.for_each([&](auto, auto ia, auto ib) { pairs.emplace_back(ia, ib); });
    Shape out_shape = p.out;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<T> out(static_cast<std::size_t>(p.n * so));
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        gemm<T>(false, false, m, n, k, T(1), a.data().data() + pairs[i].first * sa, k,
                b.data().data() + pairs[i].second * sb, n, T(0), out.data() + static_cast<std::int64_t>(i) * so, n);
    }
    return detail::make_result<T>(out_shape, std::move(out), {a, b}, "matmul", [pairs, m, n, k](Node<T>& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        const auto sa = m * k, sb = k * n, so = m * n;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const T* g = self.grad.data() + static_cast<std::int64_t>(i) * so;
            if (na.requires_grad) {
                auto ga = Node<T>::grad_of(na);
                gemm<T>(false, true, m, k, n, T(1), g, n, nb.data.data() + pairs[i].second * sb, n, T(1),
                        ga.data() + pairs[i].first * sa, k);
            }
            if (nb.requires_grad) {
                auto gb = Node<T>::grad_of(nb);
                gemm<T>(true, false, k, n, m, T(1), na.data.data() + pairs[i].first * sa, k, g, n, T(1),
                        gb.data() + pairs[i].second * sb, n);
            }
        }
    });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    std::vector<T> out(a.data().begin(), a.data().end());
    return detail::make_result<T>(std::move(shape), std::move(out), {a}, "reshape", [](Node<T>& self) {
        auto ga = Node<T>::grad_of(*self.inputs[0]);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
}

template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    if (x.ndim() < 1 || x.size(-1) < 1) throw DimensionError("softmax needs a non-empty last axis");
    const auto cols = x.size(-1);
    const auto rows = x.numel() / cols;
    auto in = x.data();
    std::vector<T> out(in.size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = in.data() + r * cols;
        T* yr = out.data() + r * cols;
        T mx = *std::max_element(xr, xr + cols);
        T total = 0;
        for (std::int64_t c = 0; c < cols; ++c) total += (yr[c] = std::exp(xr[c] - mx));
        for (std::int64_t c = 0; c < cols; ++c) yr[c] /= total;
    }
    return detail::make_result<T>(x.shape(), std::move(out), {x}, "softmax", [rows, cols](Node<T>& self) {
        auto gx = Node<T>::grad_of(*self.inputs[0]);
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* y = self.data.data() + r * cols;
            const T* gy = self.grad.data() + r * cols;
            T dot = 0;
            for (std::int64_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
            for (std::int64_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (gy[c] - dot);
        }
    });
}

template <class T>
Tensor<T> rms_normalize(const Tensor<T>& x, T eps) {
    if (x.ndim() < 1 || x.size(-1) < 1) throw DimensionError("rms_normalize needs a non-empty last axis");
    const auto cols = x.size(-1);
    const auto rows = x.numel() / cols;
    auto in = x.data();
    std::vector<T> out(in.size());
    std::vector<T> inv_rms(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = in.data() + r * cols;
        T ms = 0;
        for (std::int64_t c = 0; c < cols; ++c) ms += xr[c] * xr[c];
        ms /= static_cast<T>(cols);
        T denom = std::sqrt(ms + eps);
        // All-zero row with eps == 0: the limit is a zero output.
        T inv = denom > T(0) ? T(1) / denom : T(0);
        inv_rms[static_cast<std::size_t>(r)] = inv;
        for (std::int64_t c = 0; c < cols; ++c) out[static_cast<std::size_t>(r * cols + c)] = xr[c] * inv;
    }
    return detail::make_result<T>(
        x.shape(), std::move(out), {x}, "rms_normalize", [rows, cols, inv_rms = std::move(inv_rms)](Node<T>& self) {
            auto& in = *self.inputs[0];
            auto gx = Node<T>::grad_of(in);
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* xr = in.data.data() + r * cols;
                const T* gy = self.grad.data() + r * cols;
                const T inv = inv_rms[static_cast<std::size_t>(r)];
                T dot = 0;
                for (std::int64_t c = 0; c < cols; ++c) dot += gy[c] * xr[c];
                const T coef = inv * inv * inv * dot / static_cast<T>(cols);
                for (std::int64_t c = 0; c < cols; ++c) gx[r * cols + c] += inv * gy[c] - coef * xr[c];
            }
        });
}

template <class T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
    if (parts.empty()) throw DimensionError("concat_rows of zero tensors");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::int64_t rows = 0;
    for (const auto& p : parts) {
        if (p.ndim() < 1 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
            throw DimensionError("concat_rows trailing extents differ: " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        rows += p.size(0);
    }
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(rows * shape_numel(tail)));
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(out.size());
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    Shape shape{rows};
    shape.insert(shape.end(), tail.begin(), tail.end());
    std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
    return detail::make_result<T>(std::move(shape), std::move(out), std::move(inputs), "concat_rows",
                                  [offsets](Node<T>& self) {
                                      for (std::size_t j = 0; j < self.inputs.size(); ++j) {
                                          auto& in = *self.inputs[j];
                                          if (!in.requires_grad) continue;
                                          auto g = Node<T>::grad_of(in);
                                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[j] + i];
                                      }
                                  });
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::int64_t> index) {
    if (a.ndim() < 1) throw DimensionError("gather_rows on a scalar");
    const auto rows = a.size(0);
    const auto width = rows ? a.numel() / rows : 0;
    std::vector<T> out(index.size() * static_cast<std::size_t>(width));
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= rows) {
            throw DimensionError("gather_rows index " + std::to_string(index[i]) + " outside " +
                                 shape_str(a.shape()));
        }
        std::copy_n(a.data().begin() + index[i] * width, width, out.begin() + static_cast<std::int64_t>(i) * width);
    }
    Shape shape = a.shape();
    shape[0] = static_cast<std::int64_t>(index.size());
    std::vector<std::int64_t> idx(index.begin(), index.end());
    return detail::make_result<T>(std::move(shape), std::move(out), {a}, "gather_rows",
                                  [idx = std::move(idx), width](Node<T>& self) {
                                      auto g = Node<T>::grad_of(*self.inputs[0]);
                                      for (std::size_t i = 0; i < idx.size(); ++i) {
                                          const T* src = self.grad.data() + static_cast<std::int64_t>(i) * width;
                                          T* dst = g.data() + idx[i] * width;
                                          for (std::int64_t c = 0; c < width; ++c) dst[c] += src[c];
                                      }
                                  });
}

template <class T>
Tensor<T> slice_last(const Tensor<T>& a, std::int64_t begin, std::int64_t count) {
    const auto cols = a.size(-1);
    if (begin < 0 || count < 0 || begin + count > cols) {
        throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                             ") outside last axis of " + shape_str(a.shape()));
    }
    const auto rows = cols ? a.numel() / cols : 0;
    std::vector<T> out(static_cast<std::size_t>(rows * count));
    for (std::int64_t r = 0; r < rows; ++r) {
        std::copy_n(a.data().begin() + r * cols + begin, count, out.begin() + r * count);
    }
    Shape shape = a.shape();
    shape.back() = count;
    return detail::make_result<T>(std::move(shape), std::move(out), {a}, "slice_last",
                                  [rows, cols, begin, count](Node<T>& self) {
                                      auto g = Node<T>::grad_of(*self.inputs[0]);
                                      for (std::int64_t r = 0; r < rows; ++r) {
                                          for (std::int64_t c = 0; c < count; ++c) {
                                              g[r * cols + begin + c] += self.grad[r * count + c];
                                          }
                                      }
                                  });
}

template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ContractError("mse operands differ in shape: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    return mean(square(sub(a, b)));
}

#define MMH_INSTANTIATE_OPS(T)                                                                              \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                             \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                             \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                             \
    template Tensor<T> scale(const Tensor<T>&, T);                                                          \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                                     \
    template Tensor<T> silu(const Tensor<T>&);                                                              \
    template Tensor<T> square(const Tensor<T>&);                                                            \
    template Tensor<T> sum(const Tensor<T>&);                                                               \
    template Tensor<T> mean(const Tensor<T>&);                                                              \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                          \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                                    \
    template Tensor<T> softmax_lastdim(const Tensor<T>&);                                                   \
    template Tensor<T> rms_normalize(const Tensor<T>&, T);                                                  \
    template Tensor<T> concat_rows(std::span<const Tensor<T>>);                                             \
    template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::int64_t>);                        \
    template Tensor<T> slice_last(const Tensor<T>&, std::int64_t, std::int64_t);                            \
    template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                             \
    template void gemm<T>(bool, bool, std::int64_t, std::int64_t, std::int64_t, T, const T*, std::int64_t, \
                          const T*, std::int64_t, T, T*, std::int64_t);

MMH_INSTANTIATE_OPS(float)
MMH_INSTANTIATE_OPS(double)

}  // namespace mmh
