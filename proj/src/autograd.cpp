#include "voxfuse/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "voxfuse/errors.hpp"

namespace voxfuse {

namespace {
constexpr double kFocalProbClamp = 1e-12;
}

// ---------------------------------------------------------------------------
// plain (non-tape) reference ops
// ---------------------------------------------------------------------------

std::vector<double> softmax(const std::vector<double>& logits) {
    if (logits.empty()) throw DimensionError("softmax: empty input");
    double mx = -std::numeric_limits<double>::infinity();
    for (double z : logits) {
        if (!std::isfinite(z)) throw NumericError("softmax: non-finite logit");
        mx = std::max(mx, z);
    }
    std::vector<double> out(logits.size());
    double denom = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        denom += out[i];
    }
    for (double& v : out) v /= denom;
    return out;
}

std::vector<double> layer_norm(const std::vector<double>& x, double eps,
                               const std::vector<double>& gain, const std::vector<double>& bias) {
    const size_t d = x.size();
    if (d < 2) throw DimensionError("layer_norm: dimension must be >= 2");
    if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
    if (gain.size() != d || bias.size() != d) throw DimensionError("layer_norm: gain/bias size mismatch");
    double mean = 0.0;
    for (double v : x) {
        if (!std::isfinite(v)) throw NumericError("layer_norm: non-finite input");
        mean += v;
    }
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);  // population variance
    const double inv = 1.0 / std::sqrt(var + eps);
    std::vector<double> out(d);
    for (size_t i = 0; i < d; ++i) out[i] = gain[i] * (x[i] - mean) * inv + bias[i];
    return out;
}

// ---------------------------------------------------------------------------
// tape plumbing
// ---------------------------------------------------------------------------

VarId Tape::push(Tensor value, bool needs_grad, std::function<void(Tape&, const Tensor&)> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size() - 1);
}

VarId Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

VarId Tape::leaf(Tensor value, Tensor* grad_sink) {
    Node n;
    n.value = std::move(value);
    n.sink = grad_sink;
    n.needs_grad = grad_sink != nullptr;
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size() - 1);
}

Tensor& Tape::grad_of(VarId v) {
    Node& n = nodes_[static_cast<size_t>(v)];
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
}

void Tape::accum(VarId v, const Tensor& delta) {
    if (!nodes_[static_cast<size_t>(v)].needs_grad) return;
    grad_of(v).add_(delta);
}

void Tape::accum_into(VarId v, const std::function<void(Tensor&)>& add_fn) {
    if (!nodes_[static_cast<size_t>(v)].needs_grad) return;
    add_fn(grad_of(v));
}

void Tape::backward(VarId output, bool retain) {
    if (consumed_) throw NumericError("backward: graph already consumed");
    const Node& out = nodes_[static_cast<size_t>(output)];
    if (out.value.size() != 1) throw DimensionError("backward: output must be a scalar");
    grad_of(output)[0] += 1.0;
    for (size_t i = nodes_.size(); i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty()) continue;
        if (n.sink != nullptr) n.sink->add_(n.grad);
        if (n.back) n.back(*this, n.grad);
        if (!retain) {
            n.grad = Tensor();
            n.back = nullptr;
        }
    }
    if (!retain) consumed_ = true;
}

// ---------------------------------------------------------------------------
// elementwise / shape ops
// ---------------------------------------------------------------------------

VarId Tape::add(VarId a, VarId b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (!va.same_shape(vb)) throw DimensionError("add: shape mismatch");
    Tensor out = va;
    out.add_(vb);
    const bool ng = needs_grad(a) || needs_grad(b);
    return push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
        t.accum(a, g);
        t.accum(b, g);
    });
}

VarId Tape::sub(VarId a, VarId b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (!va.same_shape(vb)) throw DimensionError("sub: shape mismatch");
    Tensor out = va;
    out.axpy_(-1.0, vb);
    const bool ng = needs_grad(a) || needs_grad(b);
    return push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
        t.accum(a, g);
        t.accum_into(b, [&g](Tensor& gb) { gb.axpy_(-1.0, g); });
    });
}

VarId Tape::mul(VarId a, VarId b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (!va.same_shape(vb)) throw DimensionError("mul: shape mismatch");
    Tensor out = va;
    for (size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    const bool ng = needs_grad(a) || needs_grad(b);
    return push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
        t.accum_into(a, [&](Tensor& ga) {
            const Tensor& vb2 = t.val(b);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * vb2[i];
        });
        t.accum_into(b, [&](Tensor& gb) {
            const Tensor& va2 = t.val(a);
            for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * va2[i];
        });
    });
}

VarId Tape::scale(VarId a, double s) {
    Tensor out = val(a);
    out.scale_(s);
    return push(std::move(out), needs_grad(a), [a, s](Tape& t, const Tensor& g) {
        t.accum_into(a, [&](Tensor& ga) { ga.axpy_(s, g); });
    });
}

VarId Tape::relu(VarId a) {
    Tensor out = val(a);
    for (size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    return push(std::move(out), needs_grad(a), [a](Tape& t, const Tensor& g) {
        t.accum_into(a, [&](Tensor& ga) {
            const Tensor& va = t.val(a);
            for (size_t i = 0; i < ga.size(); ++i) {
                if (va[i] > 0.0) ga[i] += g[i];
            }
        });
    });
}

VarId Tape::add_rowvec(VarId x, VarId v) {
    const Tensor& vx = val(x);
    const Tensor& vv = val(v);
    if (vx.ndim() != 2 || vv.ndim() != 1 || vx.cols() != vv.dim(0))
        throw DimensionError("add_rowvec: expected [N x D] + [D]");
    Tensor out = vx;
    const int n = vx.rows(), d = vx.cols();
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) out.at(r, c) += vv[static_cast<size_t>(c)];
    const bool ng = needs_grad(x) || needs_grad(v);
    return push(std::move(out), ng, [x, v, n, d](Tape& t, const Tensor& g) {
        t.accum(x, g);
        t.accum_into(v, [&](Tensor& gv) {
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < d; ++c) gv[static_cast<size_t>(c)] += g.at(r, c);
        });
    });
}

VarId Tape::concat_cols(VarId a, VarId b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.rows() != vb.rows())
        throw DimensionError("concat_cols: row count mismatch");
    const int n = va.rows(), d1 = va.cols(), d2 = vb.cols();
    Tensor out({n, d1 + d2});
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < d1; ++c) out.at(r, c) = va.at(r, c);
        for (int c = 0; c < d2; ++c) out.at(r, d1 + c) = vb.at(r, c);
    }
    const bool ng = needs_grad(a) || needs_grad(b);
    return push(std::move(out), ng, [a, b, n, d1, d2](Tape& t, const Tensor& g) {
        t.accum_into(a, [&](Tensor& ga) {
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < d1; ++c) ga.at(r, c) += g.at(r, c);
        });
        t.accum_into(b, [&](Tensor& gb) {
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < d2; ++c) gb.at(r, c) += g.at(r, d1 + c);
        });
    });
}

VarId Tape::cols_slice(VarId x, int c0, int c1) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 2 || c0 < 0 || c1 > vx.cols() || c0 >= c1)
        throw DimensionError("cols_slice: bad column range");
    const int n = vx.rows(), w = c1 - c0;
    Tensor out({n, w});
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < w; ++c) out.at(r, c) = vx.at(r, c0 + c);
    return push(std::move(out), needs_grad(x), [x, c0, n, w](Tape& t, const Tensor& g) {
        t.accum_into(x, [&](Tensor& gx) {
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < w; ++c) gx.at(r, c0 + c) += g.at(r, c);
        });
    });
}

VarId Tape::colcat(const std::vector<VarId>& cols) {
    if (cols.empty()) throw DimensionError("colcat: empty input");
    const int n = val(cols[0]).dim(0);
    const int k = static_cast<int>(cols.size());
    bool ng = false;
    for (VarId c : cols) {
        if (val(c).ndim() != 1 || val(c).dim(0) != n) throw DimensionError("colcat: expected aligned [N] vectors");
        ng = ng || needs_grad(c);
    }
    Tensor out({n, k});
    for (int j = 0; j < k; ++j) {
        const Tensor& vc = val(cols[static_cast<size_t>(j)]);
        for (int r = 0; r < n; ++r) out.at(r, j) = vc[static_cast<size_t>(r)];
    }
    return push(std::move(out), ng, [cols, n, k](Tape& t, const Tensor& g) {
        for (int j = 0; j < k; ++j) {
            t.accum_into(cols[static_cast<size_t>(j)], [&](Tensor& gc) {
                for (int r = 0; r < n; ++r) gc[static_cast<size_t>(r)] += g.at(r, j);
            });
        }
    });
}

VarId Tape::gather_rows(VarId x, std::vector<int> idx) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 2) throw DimensionError("gather_rows: expected 2-D input");
    const int d = vx.cols();
    const int m = static_cast<int>(idx.size());
    Tensor out({m, d});
    for (int r = 0; r < m; ++r) {
        const int src = idx[static_cast<size_t>(r)];
        if (src < 0 || src >= vx.rows()) throw DimensionError("gather_rows: index out of range");
        for (int c = 0; c < d; ++c) out.at(r, c) = vx.at(src, c);
    }
    return push(std::move(out), needs_grad(x),
                [x, idx = std::move(idx), m, d](Tape& t, const Tensor& g) {
                    t.accum_into(x, [&](Tensor& gx) {
                        for (int r = 0; r < m; ++r) {
                            const int src = idx[static_cast<size_t>(r)];
                            for (int c = 0; c < d; ++c) gx.at(src, c) += g.at(r, c);
                        }
                    });
                });
}

VarId Tape::chw_to_rows(VarId x) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 3) throw DimensionError("chw_to_rows: expected [C,H,W]");
    const int c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
    Tensor out({h * w, c});
    for (int ch = 0; ch < c; ++ch) {
        const double* plane = vx.data() + static_cast<size_t>(ch) * h * w;
        for (int p = 0; p < h * w; ++p) out.at(p, ch) = plane[p];
    }
    return push(std::move(out), needs_grad(x), [x, c, h, w](Tape& t, const Tensor& g) {
        t.accum_into(x, [&](Tensor& gx) {
            for (int ch = 0; ch < c; ++ch) {
                double* plane = gx.data() + static_cast<size_t>(ch) * h * w;
                for (int p = 0; p < h * w; ++p) plane[p] += g.at(p, ch);
            }
        });
    });
}

VarId Tape::rows_to_chw(VarId x, int c, int h, int w) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 2 || vx.rows() != h * w || vx.cols() != c)
        throw DimensionError("rows_to_chw: shape mismatch");
    Tensor out({c, h, w});
    for (int ch = 0; ch < c; ++ch) {
        double* plane = out.data() + static_cast<size_t>(ch) * h * w;
        for (int p = 0; p < h * w; ++p) plane[p] = vx.at(p, ch);
    }
    return push(std::move(out), needs_grad(x), [x, c, h, w](Tape& t, const Tensor& g) {
        t.accum_into(x, [&](Tensor& gx) {
            for (int ch = 0; ch < c; ++ch) {
                const double* plane = g.data() + static_cast<size_t>(ch) * h * w;
                for (int p = 0; p < h * w; ++p) gx.at(p, ch) += plane[p];
            }
        });
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

VarId Tape::affine_rows(VarId x, VarId w, VarId b) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(w);
    const Tensor& vb = val(b);
    if (vx.ndim() != 2 || vw.ndim() != 2 || vb.ndim() != 1)
        throw DimensionError("affine_rows: expected x[N x Din], w[Din x Dout], b[Dout]");
    const int n = vx.rows(), din = vx.cols(), dout = vw.cols();
    if (vw.rows() != din || vb.dim(0) != dout) throw DimensionError("affine_rows: dimension mismatch");
    Tensor out({n, dout});
    for (int r = 0; r < n; ++r) {
        double* orow = out.data() + static_cast<size_t>(r) * dout;
        for (int c = 0; c < dout; ++c) orow[c] = vb[static_cast<size_t>(c)];
        const double* xrow = vx.data() + static_cast<size_t>(r) * din;
        for (int i = 0; i < din; ++i) {
            const double xv = xrow[i];
            const double* wrow = vw.data() + static_cast<size_t>(i) * dout;
            for (int c = 0; c < dout; ++c) orow[c] += xv * wrow[c];
        }
    }
    const bool ng = needs_grad(x) || needs_grad(w) || needs_grad(b);
    return push(std::move(out), ng, [x, w, b, n, din, dout](Tape& t, const Tensor& g) {
        t.accum_into(x, [&](Tensor& gx) {
            const Tensor& vw2 = t.val(w);
            for (int r = 0; r < n; ++r) {
                const double* grow = g.data() + static_cast<size_t>(r) * dout;
                double* gxrow = gx.data() + static_cast<size_t>(r) * din;
                for (int i = 0; i < din; ++i) {
                    const double* wrow = vw2.data() + static_cast<size_t>(i) * dout;
                    double acc = 0.0;
                    for (int c = 0; c < dout; ++c) acc += grow[c] * wrow[c];
                    gxrow[i] += acc;
                }
            }
        });
        t.accum_into(w, [&](Tensor& gw) {
            const Tensor& vx2 = t.val(x);
            for (int r = 0; r < n; ++r) {
                const double* grow = g.data() + static_cast<size_t>(r) * dout;
                const double* xrow = vx2.data() + static_cast<size_t>(r) * din;
                for (int i = 0; i < din; ++i) {
                    const double xv = xrow[i];
                    double* gwrow = gw.data() + static_cast<size_t>(i) * dout;
                    for (int c = 0; c < dout; ++c) gwrow[c] += xv * grow[c];
                }
            }
        });
        t.accum_into(b, [&](Tensor& gb) {
            for (int r = 0; r < n; ++r) {
                const double* grow = g.data() + static_cast<size_t>(r) * dout;
                for (int c = 0; c < dout; ++c) gb[static_cast<size_t>(c)] += grow[c];
            }
        });
    });
}

VarId Tape::rows_dot_heads(VarId a, VarId b, int heads) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (!va.same_shape(vb) || va.ndim() != 2) throw DimensionError("rows_dot_heads: shape mismatch");
    const int n = va.rows(), d = va.cols();
    if (heads < 1 || d % heads != 0) throw DimensionError("rows_dot_heads: heads must divide dim");
    const int seg = d / heads;
    Tensor out({n, heads});
    for (int r = 0; r < n; ++r) {
        for (int hd = 0; hd < heads; ++hd) {
            double acc = 0.0;
            for (int i = 0; i < seg; ++i) acc += va.at(r, hd * seg + i) * vb.at(r, hd * seg + i);
            out.at(r, hd) = acc;
        }
    }
    const bool ng = needs_grad(a) || needs_grad(b);
    return push(std::move(out), ng, [a, b, n, heads, seg](Tape& t, const Tensor& g) {
        t.accum_into(a, [&](Tensor& ga) {
            const Tensor& vb2 = t.val(b);
            for (int r = 0; r < n; ++r)
                for (int hd = 0; hd < heads; ++hd)
                    for (int i = 0; i < seg; ++i)
                        ga.at(r, hd * seg + i) += g.at(r, hd) * vb2.at(r, hd * seg + i);
        });
        t.accum_into(b, [&](Tensor& gb) {
            const Tensor& va2 = t.val(a);
            for (int r = 0; r < n; ++r)
                for (int hd = 0; hd < heads; ++hd)
                    for (int i = 0; i < seg; ++i)
                        gb.at(r, hd * seg + i) += g.at(r, hd) * va2.at(r, hd * seg + i);
        });
    });
}

VarId Tape::scale_rows_heads(VarId x, VarId s, int heads) {
    const Tensor& vx = val(x);
    const Tensor& vs = val(s);
    if (vx.ndim() != 2 || vs.ndim() != 2 || vs.rows() != vx.rows() || vs.cols() != heads)
        throw DimensionError("scale_rows_heads: expected x[N x D], s[N x heads]");
    const int n = vx.rows(), d = vx.cols();
    if (d % heads != 0) throw DimensionError("scale_rows_heads: heads must divide dim");
    const int seg = d / heads;
    Tensor out({n, d});
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) out.at(r, c) = vx.at(r, c) * vs.at(r, c / seg);
    const bool ng = needs_grad(x) || needs_grad(s);
    return push(std::move(out), ng, [x, s, n, d, seg](Tape& t, const Tensor& g) {
        t.accum_into(x, [&](Tensor& gx) {
            const Tensor& vs2 = t.val(s);
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < d; ++c) gx.at(r, c) += g.at(r, c) * vs2.at(r, c / seg);
        });
        t.accum_into(s, [&](Tensor& gs) {
            const Tensor& vx2 = t.val(x);
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < d; ++c) gs.at(r, c / seg) += g.at(r, c) * vx2.at(r, c);
        });
    });
}

// ---------------------------------------------------------------------------
// normalization / activations
// ---------------------------------------------------------------------------

VarId Tape::layer_norm_rows(VarId x, VarId gain, VarId bias, double eps) {
    const Tensor& vx = val(x);
    const Tensor& vg = val(gain);
    const Tensor& vb = val(bias);
    if (vx.ndim() != 2) throw DimensionError("layer_norm_rows: expected 2-D input");
    const int n = vx.rows(), d = vx.cols();
    if (d < 2) throw DimensionError("layer_norm_rows: dimension must be >= 2");
    if (eps <= 0.0) throw ConfigError("layer_norm_rows: eps must be positive");
    if (vg.ndim() != 1 || vg.dim(0) != d || vb.ndim() != 1 || vb.dim(0) != d)
        throw DimensionError("layer_norm_rows: gain/bias size mismatch");
    if (!vx.all_finite()) throw NumericError("layer_norm_rows: non-finite input");

    Tensor out({n, d});
    // normalized pre-affine values and the inverse stddev are needed in the
    // backward pass; recompute there from the stored input instead of caching.
    for (int r = 0; r < n; ++r) {
        const double* xr = vx.data() + static_cast<size_t>(r) * d;
        double mean = 0.0;
        for (int c = 0; c < d; ++c) mean += xr[c];
        mean /= d;
        double var = 0.0;
        for (int c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int c = 0; c < d; ++c)
            out.at(r, c) = vg[static_cast<size_t>(c)] * (xr[c] - mean) * inv + vb[static_cast<size_t>(c)];
    }
    const bool ng = needs_grad(x) || needs_grad(gain) || needs_grad(bias);
    return push(std::move(out), ng, [x, gain, bias, eps, n, d](Tape& t, const Tensor& g) {
        const Tensor& vx2 = t.val(x);
        const Tensor& vg2 = t.val(gain);
        std::vector<double> xh(static_cast<size_t>(d));
        std::vector<double> dxh(static_cast<size_t>(d));
        for (int r = 0; r < n; ++r) {
            const double* xr = vx2.data() + static_cast<size_t>(r) * d;
            const double* gr = g.data() + static_cast<size_t>(r) * d;
            double mean = 0.0;
            for (int c = 0; c < d; ++c) mean += xr[c];
            mean /= d;
            double var = 0.0;
            for (int c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
            var /= d;
            const double inv = 1.0 / std::sqrt(var + eps);
            for (int c = 0; c < d; ++c) xh[static_cast<size_t>(c)] = (xr[c] - mean) * inv;

            t.accum_into(gain, [&](Tensor& gg) {
                for (int c = 0; c < d; ++c) gg[static_cast<size_t>(c)] += gr[c] * xh[static_cast<size_t>(c)];
            });
            t.accum_into(bias, [&](Tensor& gb) {
                for (int c = 0; c < d; ++c) gb[static_cast<size_t>(c)] += gr[c];
            });
            t.accum_into(x, [&](Tensor& gx) {
                double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                for (int c = 0; c < d; ++c) {
                    dxh[static_cast<size_t>(c)] = gr[c] * vg2[static_cast<size_t>(c)];
                    mean_dxh += dxh[static_cast<size_t>(c)];
                    mean_dxh_xh += dxh[static_cast<size_t>(c)] * xh[static_cast<size_t>(c)];
                }
                mean_dxh /= d;
                mean_dxh_xh /= d;
                double* gxr = gx.data() + static_cast<size_t>(r) * d;
                for (int c = 0; c < d; ++c)
                    gxr[c] += inv * (dxh[static_cast<size_t>(c)] - mean_dxh - xh[static_cast<size_t>(c)] * mean_dxh_xh);
            });
        }
    });
}

VarId Tape::softmax_interleaved(VarId x, int groups, int stride) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 2 || vx.cols() != groups * stride)
        throw DimensionError("softmax_interleaved: cols must equal groups*stride");
    if (groups < 1) throw DimensionError("softmax_interleaved: empty group");
    const int n = vx.rows();
    if (!vx.all_finite()) throw NumericError("softmax_interleaved: non-finite logits");
    Tensor out({n, groups * stride});
    for (int r = 0; r < n; ++r) {
        for (int h = 0; h < stride; ++h) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int k = 0; k < groups; ++k) mx = std::max(mx, vx.at(r, h + k * stride));
            double denom = 0.0;
            for (int k = 0; k < groups; ++k) {
                const double e = std::exp(vx.at(r, h + k * stride) - mx);
                out.at(r, h + k * stride) = e;
                denom += e;
            }
            for (int k = 0; k < groups; ++k) out.at(r, h + k * stride) /= denom;
        }
    }
    const VarId self = push(std::move(out), needs_grad(x), nullptr);
    if (needs_grad(x)) {
        Node& node = nodes_[static_cast<size_t>(self)];
        node.back = [x, self, groups, stride, n](Tape& t, const Tensor& g) {
            const Tensor& y = t.val(self);
            t.accum_into(x, [&](Tensor& gx) {
                for (int r = 0; r < n; ++r) {
                    for (int h = 0; h < stride; ++h) {
                        double dot = 0.0;
                        for (int k = 0; k < groups; ++k) {
                            const int c = h + k * stride;
                            dot += g.at(r, c) * y.at(r, c);
                        }
                        for (int k = 0; k < groups; ++k) {
                            const int c = h + k * stride;
                            gx.at(r, c) += y.at(r, c) * (g.at(r, c) - dot);
                        }
                    }
                }
            });
        };
    }
    return self;
}

VarId Tape::softmax_rows(VarId x) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 2) throw DimensionError("softmax_rows: expected 2-D input");
    return softmax_interleaved(x, vx.cols(), 1);
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

VarId Tape::sum_all(VarId x) {
    Tensor out = Tensor::scalar(val(x).sum());
    return push(std::move(out), needs_grad(x), [x](Tape& t, const Tensor& g) {
        t.accum_into(x, [&](Tensor& gx) {
            const double gv = g[0];
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += gv;
        });
    });
}

VarId Tape::mean_all(VarId x) {
    const size_t n = val(x).size();
    if (n == 0) throw DimensionError("mean_all: empty input");
    Tensor out = Tensor::scalar(val(x).sum() / static_cast<double>(n));
    return push(std::move(out), needs_grad(x), [x, n](Tape& t, const Tensor& g) {
        t.accum_into(x, [&](Tensor& gx) {
            const double gv = g[0] / static_cast<double>(n);
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += gv;
        });
    });
}

VarId Tape::gather_target(VarId probs, std::vector<int> targets) {
    const Tensor& vp = val(probs);
    if (vp.ndim() != 2) throw DimensionError("gather_target: expected [N x C]");
    const int n = vp.rows(), c = vp.cols();
    if (static_cast<int>(targets.size()) != n) throw DimensionError("gather_target: target count mismatch");
    Tensor out({n});
    for (int r = 0; r < n; ++r) {
        const int tgt = targets[static_cast<size_t>(r)];
        if (tgt < 0 || tgt >= c) throw DimensionError("gather_target: class id out of range");
        out[static_cast<size_t>(r)] = vp.at(r, tgt);
    }
    return push(std::move(out), needs_grad(probs),
                [probs, targets = std::move(targets), n](Tape& t, const Tensor& g) {
                    t.accum_into(probs, [&](Tensor& gp) {
                        for (int r = 0; r < n; ++r)
                            gp.at(r, targets[static_cast<size_t>(r)]) += g[static_cast<size_t>(r)];
                    });
                });
}

VarId Tape::focal_term(VarId p, double gamma) {
    if (gamma < 0.0) throw ConfigError("focal_term: gamma must be >= 0");
    const Tensor& vp = val(p);
    Tensor out(vp.shape());
    for (size_t i = 0; i < vp.size(); ++i) {
        const double pc = std::max(vp[i], kFocalProbClamp);
        out[i] = std::pow(1.0 - vp[i], gamma) * (-std::log(pc));
    }
    return push(std::move(out), needs_grad(p), [p, gamma](Tape& t, const Tensor& g) {
        t.accum_into(p, [&](Tensor& gp) {
            const Tensor& vp2 = t.val(p);
            for (size_t i = 0; i < gp.size(); ++i) {
                const double pv = vp2[i];
                const double pc = std::max(pv, kFocalProbClamp);
                double deriv = -std::pow(1.0 - pv, gamma) / pc;
                if (pv < kFocalProbClamp) deriv = 0.0;  // inside the clamp the log is constant
                if (gamma > 0.0) deriv += gamma * std::pow(1.0 - pv, gamma - 1.0) * std::log(pc);
                gp[i] += g[i] * deriv;
            }
        });
    });
}

// ---------------------------------------------------------------------------
// convolutions / pooling
// ---------------------------------------------------------------------------

VarId Tape::conv2d(VarId x, VarId w, VarId b, int stride, int pad) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(w);
    const Tensor& vb = val(b);
    if (vx.ndim() != 3 || vw.ndim() != 4 || vb.ndim() != 1)
        throw DimensionError("conv2d: expected x[Cin,H,W], w[Cout,Cin,kh,kw], b[Cout]");
    const int cin = vx.dim(0), h = vx.dim(1), wdt = vx.dim(2);
    const int cout = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
    if (vw.dim(1) != cin) throw DimensionError("conv2d: channel count mismatch");
    if (vb.dim(0) != cout) throw DimensionError("conv2d: bias size mismatch");
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wdt + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw DimensionError("conv2d: output would be empty");

    Tensor out({cout, ho, wo});
    const auto xat = [&](int c, int y, int xx) {
        return vx.data()[(static_cast<size_t>(c) * h + y) * wdt + xx];
    };
    for (int co = 0; co < cout; ++co) {
        double* oplane = out.data() + static_cast<size_t>(co) * ho * wo;
        const double bias_v = vb[static_cast<size_t>(co)];
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                double acc = bias_v;
                for (int ci = 0; ci < cin; ++ci) {
                    const double* wrow = vw.data() + ((static_cast<size_t>(co) * cin + ci) * kh) * kw;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= wdt) continue;
                            acc += xat(ci, iy, ix) * wrow[ky * kw + kx];
                        }
                    }
                }
                oplane[oy * wo + ox] = acc;
            }
        }
    }
    const bool ng = needs_grad(x) || needs_grad(w) || needs_grad(b);
    return push(std::move(out), ng,
                [x, w, b, stride, pad, cin, h, wdt, cout, kh, kw, ho, wo](Tape& t, const Tensor& g) {
                    const Tensor& vx2 = t.val(x);
                    const Tensor& vw2 = t.val(w);
                    t.accum_into(b, [&](Tensor& gb) {
                        for (int co = 0; co < cout; ++co) {
                            const double* gplane = g.data() + static_cast<size_t>(co) * ho * wo;
                            double acc = 0.0;
                            for (int p = 0; p < ho * wo; ++p) acc += gplane[p];
                            gb[static_cast<size_t>(co)] += acc;
                        }
                    });
                    const bool want_x = t.needs_grad(x);
                    const bool want_w = t.needs_grad(w);
                    if (!want_x && !want_w) return;
                    Tensor* gx = want_x ? &t.grad_of(x) : nullptr;
                    Tensor* gw = want_w ? &t.grad_of(w) : nullptr;
                    for (int co = 0; co < cout; ++co) {
                        const double* gplane = g.data() + static_cast<size_t>(co) * ho * wo;
                        for (int oy = 0; oy < ho; ++oy) {
                            for (int ox = 0; ox < wo; ++ox) {
                                const double gv = gplane[oy * wo + ox];
                                if (gv == 0.0) continue;
                                for (int ci = 0; ci < cin; ++ci) {
                                    const size_t wbase = ((static_cast<size_t>(co) * cin + ci) * kh) * kw;
                                    for (int ky = 0; ky < kh; ++ky) {
                                        const int iy = oy * stride + ky - pad;
                                        if (iy < 0 || iy >= h) continue;
                                        for (int kx = 0; kx < kw; ++kx) {
                                            const int ix = ox * stride + kx - pad;
                                            if (ix < 0 || ix >= wdt) continue;
                                            const size_t xi = (static_cast<size_t>(ci) * h + iy) * wdt + ix;
                                            if (gx) gx->data()[xi] += gv * vw2.data()[wbase + ky * kw + kx];
                                            if (gw) gw->data()[wbase + ky * kw + kx] += gv * vx2.data()[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
}

VarId Tape::upsample2x_chw(VarId x) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 3) throw DimensionError("upsample2x_chw: expected [C,H,W]");
    const int c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch) {
        const double* ip = vx.data() + static_cast<size_t>(ch) * h * w;
        double* op = out.data() + static_cast<size_t>(ch) * 4 * h * w;
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx) op[y * 2 * w + xx] = ip[(y / 2) * w + xx / 2];
    }
    return push(std::move(out), needs_grad(x), [x, c, h, w](Tape& t, const Tensor& g) {
        t.accum_into(x, [&](Tensor& gx) {
            for (int ch = 0; ch < c; ++ch) {
                double* gp = gx.data() + static_cast<size_t>(ch) * h * w;
                const double* op = g.data() + static_cast<size_t>(ch) * 4 * h * w;
                for (int y = 0; y < 2 * h; ++y)
                    for (int xx = 0; xx < 2 * w; ++xx) gp[(y / 2) * w + xx / 2] += op[y * 2 * w + xx];
            }
        });
    });
}

VarId Tape::sparse_conv(VarId x, VarId w, VarId b, std::shared_ptr<const ConvPattern> pattern) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(w);
    const Tensor& vb = val(b);
    if (!pattern) throw DimensionError("sparse_conv: null pattern");
    if (vx.ndim() != 2 || vw.ndim() != 3 || vb.ndim() != 1)
        throw DimensionError("sparse_conv: expected x[N x Cin], w[taps,Cin,Cout], b[Cout]");
    const int cin = vx.cols(), cout = vw.dim(2);
    if (vx.rows() != pattern->n_in) throw DimensionError("sparse_conv: input row count mismatch");
    if (vw.dim(0) != pattern->taps || vw.dim(1) != cin) throw DimensionError("sparse_conv: weight shape mismatch");
    if (vb.dim(0) != cout) throw DimensionError("sparse_conv: bias size mismatch");

    Tensor out({pattern->n_out, cout});
    for (int r = 0; r < pattern->n_out; ++r) {
        double* orow = out.data() + static_cast<size_t>(r) * cout;
        for (int c = 0; c < cout; ++c) orow[c] = vb[static_cast<size_t>(c)];
    }
    for (int tap = 0; tap < pattern->taps; ++tap) {
        const double* wt = vw.data() + static_cast<size_t>(tap) * cin * cout;
        for (const auto& [o, i] : pattern->pairs[static_cast<size_t>(tap)]) {
            const double* xrow = vx.data() + static_cast<size_t>(i) * cin;
            double* orow = out.data() + static_cast<size_t>(o) * cout;
            for (int ci = 0; ci < cin; ++ci) {
                const double xv = xrow[ci];
                const double* wrow = wt + static_cast<size_t>(ci) * cout;
                for (int co = 0; co < cout; ++co) orow[co] += xv * wrow[co];
            }
        }
    }
    const bool ng = needs_grad(x) || needs_grad(w) || needs_grad(b);
    return push(std::move(out), ng,
                [x, w, b, pattern = std::move(pattern), cin, cout](Tape& t, const Tensor& g) {
                    t.accum_into(b, [&](Tensor& gb) {
                        for (int r = 0; r < pattern->n_out; ++r)
                            for (int c = 0; c < cout; ++c) gb[static_cast<size_t>(c)] += g.at(r, c);
                    });
                    const bool want_x = t.needs_grad(x);
                    const bool want_w = t.needs_grad(w);
                    if (!want_x && !want_w) return;
                    const Tensor& vx2 = t.val(x);
                    const Tensor& vw2 = t.val(w);
                    Tensor* gx = want_x ? &t.grad_of(x) : nullptr;
                    Tensor* gw = want_w ? &t.grad_of(w) : nullptr;
                    for (int tap = 0; tap < pattern->taps; ++tap) {
                        const double* wt = vw2.data() + static_cast<size_t>(tap) * cin * cout;
                        double* gwt = gw ? gw->data() + static_cast<size_t>(tap) * cin * cout : nullptr;
                        for (const auto& [o, i] : pattern->pairs[static_cast<size_t>(tap)]) {
                            const double* grow = g.data() + static_cast<size_t>(o) * cout;
                            const double* xrow = vx2.data() + static_cast<size_t>(i) * cin;
                            for (int ci = 0; ci < cin; ++ci) {
                                const double* wrow = wt + static_cast<size_t>(ci) * cout;
                                double acc = 0.0;
                                for (int co = 0; co < cout; ++co) acc += grow[co] * wrow[co];
                                if (gx) gx->data()[static_cast<size_t>(i) * cin + ci] += acc;
                                if (gwt) {
                                    double* gwrow = gwt + static_cast<size_t>(ci) * cout;
                                    const double xv = xrow[ci];
                                    for (int co = 0; co < cout; ++co) gwrow[co] += xv * grow[co];
                                }
                            }
                        }
                    }
                });
}

VarId Tape::pooled_mean_rows(VarId x, std::vector<int> group, int n_groups) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 2) throw DimensionError("pooled_mean_rows: expected 2-D input");
    const int p = vx.rows(), d = vx.cols();
    if (static_cast<int>(group.size()) != p) throw DimensionError("pooled_mean_rows: group index count mismatch");
    std::vector<int> counts(static_cast<size_t>(n_groups), 0);
    for (int r = 0; r < p; ++r) {
        const int gidx = group[static_cast<size_t>(r)];
        if (gidx < 0 || gidx >= n_groups) throw DimensionError("pooled_mean_rows: group index out of range");
        ++counts[static_cast<size_t>(gidx)];
    }
    Tensor out({n_groups, d});
    for (int r = 0; r < p; ++r) {
        const int gidx = group[static_cast<size_t>(r)];
        for (int c = 0; c < d; ++c) out.at(gidx, c) += vx.at(r, c);
    }
    for (int gidx = 0; gidx < n_groups; ++gidx) {
        if (counts[static_cast<size_t>(gidx)] == 0) continue;
        const double inv = 1.0 / counts[static_cast<size_t>(gidx)];
        for (int c = 0; c < d; ++c) out.at(gidx, c) *= inv;
    }
    return push(std::move(out), needs_grad(x),
                [x, group = std::move(group), counts = std::move(counts), p, d](Tape& t, const Tensor& g) {
                    t.accum_into(x, [&](Tensor& gx) {
                        for (int r = 0; r < p; ++r) {
                            const int gidx = group[static_cast<size_t>(r)];
                            const double inv = 1.0 / counts[static_cast<size_t>(gidx)];
                            for (int c = 0; c < d; ++c) gx.at(r, c) += g.at(gidx, c) * inv;
                        }
                    });
                });
}

}  // namespace voxfuse
