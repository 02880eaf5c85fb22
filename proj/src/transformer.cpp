#include "bilayer/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bilayer {

namespace {

constexpr double kMaskedLogit = -1e30;

thread_local double g_attn_margin = std::numeric_limits<double>::infinity();

Tensor mat_init(std::size_t rows, std::size_t cols, Rng& rng) {
    const double stddev = std::sqrt(1.0 / double(rows));
    return Tensor::randn({rows, cols}, rng, stddev, true);
}

AttentionParams init_attention(std::size_t d, Rng& rng) {
    AttentionParams p;
    p.wq = mat_init(d, d, rng);
    p.bq = Tensor::zeros({d}, true);
    p.wk = mat_init(d, d, rng);
    p.bk = Tensor::zeros({d}, true);
    p.wv = mat_init(d, d, rng);
    p.bv = Tensor::zeros({d}, true);
    p.wo = mat_init(d, d, rng);
    p.bo = Tensor::zeros({d}, true);
    p.ln_gain = Tensor::full({d}, 1.0, true);
    p.ln_bias = Tensor::zeros({d}, true);
    return p;
}

FfnParams init_ffn(std::size_t d, std::size_t f, Rng& rng) {
    FfnParams p;
    p.w1 = mat_init(d, f, rng);
    p.b1 = Tensor::zeros({f}, true);
    p.w2 = mat_init(f, d, rng);
    p.b2 = Tensor::zeros({d}, true);
    p.ln_gain = Tensor::full({d}, 1.0, true);
    p.ln_bias = Tensor::zeros({d}, true);
    return p;
}

MlpParams init_mlp(std::size_t d_in, std::size_t d_hidden, std::size_t d_out, Rng& rng) {
    MlpParams p;
    p.w1 = mat_init(d_in, d_hidden, rng);
    p.b1 = Tensor::zeros({d_hidden}, true);
    p.w2 = mat_init(d_hidden, d_out, rng);
    p.b2 = Tensor::zeros({d_out}, true);
    return p;
}

SingleDecoderParams init_single_decoder(const TransformerConfig& cfg, Rng& rng) {
    SingleDecoderParams p;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        DecoderLayerParams lp;
        lp.cross = init_attention(cfg.dim, rng);
        lp.self_attn = init_attention(cfg.dim, rng);
        lp.ffn = init_ffn(cfg.dim, cfg.ffn_dim, rng);
        p.layers.push_back(std::move(lp));
    }
    p.mask_mlp = init_mlp(cfg.dim, cfg.dim, cfg.dim, rng);
    p.class_w = mat_init(cfg.dim, cfg.classes + 1, rng);
    p.class_b = Tensor::zeros({cfg.classes + 1}, true);
    return p;
}

void collect_attention(std::vector<Tensor>& out, AttentionParams& p) {
    out.insert(out.end(), {p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo, p.ln_gain, p.ln_bias});
}

void collect_single(std::vector<Tensor>& out, SingleDecoderParams& p) {
    for (auto& l : p.layers) {
        collect_attention(out, l.cross);
        collect_attention(out, l.self_attn);
        out.insert(out.end(), {l.ffn.w1, l.ffn.b1, l.ffn.w2, l.ffn.b2, l.ffn.ln_gain, l.ffn.ln_bias});
    }
    out.insert(out.end(), {p.mask_mlp.w1, p.mask_mlp.b1, p.mask_mlp.w2, p.mask_mlp.b2, p.class_w,
                           p.class_b});
}

void register_attention(Checkpoint& ck, const std::string& prefix, const AttentionParams& p) {
    ck.add(prefix + ".wq", p.wq);
    ck.add(prefix + ".bq", p.bq);
    ck.add(prefix + ".wk", p.wk);
    ck.add(prefix + ".bk", p.bk);
    ck.add(prefix + ".wv", p.wv);
    ck.add(prefix + ".bv", p.bv);
    ck.add(prefix + ".wo", p.wo);
    ck.add(prefix + ".bo", p.bo);
    ck.add(prefix + ".ln.gain", p.ln_gain);
    ck.add(prefix + ".ln.bias", p.ln_bias);
}

AttentionParams load_attention(const Checkpoint& ck, const std::string& prefix) {
    AttentionParams p;
    p.wq = ck.get(prefix + ".wq");
    p.bq = ck.get(prefix + ".bq");
    p.wk = ck.get(prefix + ".wk");
    p.bk = ck.get(prefix + ".bk");
    p.wv = ck.get(prefix + ".wv");
    p.bv = ck.get(prefix + ".bv");
    p.wo = ck.get(prefix + ".wo");
    p.bo = ck.get(prefix + ".bo");
    p.ln_gain = ck.get(prefix + ".ln.gain");
    p.ln_bias = ck.get(prefix + ".ln.bias");
    return p;
}

void register_single(Checkpoint& ck, const std::string& prefix, const SingleDecoderParams& p) {
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const std::string lp = prefix + ".layer" + std::to_string(l);
        register_attention(ck, lp + ".cross", p.layers[l].cross);
        register_attention(ck, lp + ".self", p.layers[l].self_attn);
        const FfnParams& f = p.layers[l].ffn;
        ck.add(lp + ".ffn.w1", f.w1);
        ck.add(lp + ".ffn.b1", f.b1);
        ck.add(lp + ".ffn.w2", f.w2);
        ck.add(lp + ".ffn.b2", f.b2);
        ck.add(lp + ".ffn.ln.gain", f.ln_gain);
        ck.add(lp + ".ffn.ln.bias", f.ln_bias);
    }
    ck.add(prefix + ".maskmlp.w1", p.mask_mlp.w1);
    ck.add(prefix + ".maskmlp.b1", p.mask_mlp.b1);
    ck.add(prefix + ".maskmlp.w2", p.mask_mlp.w2);
    ck.add(prefix + ".maskmlp.b2", p.mask_mlp.b2);
    ck.add(prefix + ".class.w", p.class_w);
    ck.add(prefix + ".class.b", p.class_b);
}

SingleDecoderParams load_single(const Checkpoint& ck, const std::string& prefix,
                                std::size_t layers) {
    SingleDecoderParams p;
    for (std::size_t l = 0; l < layers; ++l) {
        const std::string lp = prefix + ".layer" + std::to_string(l);
        DecoderLayerParams layer;
        layer.cross = load_attention(ck, lp + ".cross");
        layer.self_attn = load_attention(ck, lp + ".self");
        layer.ffn.w1 = ck.get(lp + ".ffn.w1");
        layer.ffn.b1 = ck.get(lp + ".ffn.b1");
        layer.ffn.w2 = ck.get(lp + ".ffn.w2");
        layer.ffn.b2 = ck.get(lp + ".ffn.b2");
        layer.ffn.ln_gain = ck.get(lp + ".ffn.ln.gain");
        layer.ffn.ln_bias = ck.get(lp + ".ffn.ln.bias");
        p.layers.push_back(std::move(layer));
    }
    p.mask_mlp.w1 = ck.get(prefix + ".maskmlp.w1");
    p.mask_mlp.b1 = ck.get(prefix + ".maskmlp.b1");
    p.mask_mlp.w2 = ck.get(prefix + ".maskmlp.w2");
    p.mask_mlp.b2 = ck.get(prefix + ".maskmlp.b2");
    p.class_w = ck.get(prefix + ".class.w");
    p.class_b = ck.get(prefix + ".class.b");
    return p;
}

}  // namespace

QuerySet init_queries(const TransformerConfig& cfg, Rng& rng) {
    QuerySet qs;
    qs.q_count = cfg.queries;
    qs.dim = cfg.dim;
    qs.occludee_q = Tensor::randn({cfg.queries, cfg.dim}, rng, 1.0, true);
    return qs;
}

DecoderParams init_decoder(const TransformerConfig& cfg, Rng& rng) {
    DecoderParams p;
    p.occluder = init_single_decoder(cfg, rng);
    p.occludee = init_single_decoder(cfg, rng);
    p.derive_mlp = init_mlp(cfg.dim, cfg.dim, cfg.dim, rng);
    return p;
}

StemParams init_stem(std::size_t dim, Rng& rng) {
    StemParams p;
    const double s1 = std::sqrt(2.0 / (5.0 * 9.0));
    p.conv1_w = Tensor::randn({dim, 5, 3, 3}, rng, s1, true);
    p.conv1_b = Tensor::zeros({dim}, true);
    const double s2 = std::sqrt(2.0 / (double(dim) * 9.0));
    p.conv2_w = Tensor::randn({dim, dim, 3, 3}, rng, s2, true);
    p.conv2_b = Tensor::zeros({dim}, true);
    return p;
}

PixelFeatures run_stem(const Tensor& image_chw, const StemParams& p) {
    const std::size_t h = image_chw.dim(1), w = image_chw.dim(2);
    // append normalized coordinate planes so the features carry position
    std::vector<double> data = image_chw.value();
    data.resize((image_chw.dim(0) + 2) * h * w);
    double* ygrid = data.data() + image_chw.dim(0) * h * w;
    double* xgrid = ygrid + h * w;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            ygrid[y * w + x] = h > 1 ? double(y) / double(h - 1) : 0.0;
            xgrid[y * w + x] = w > 1 ? double(x) / double(w - 1) : 0.0;
        }
    Tensor in = Tensor::from_data({image_chw.dim(0) + 2, h, w}, std::move(data));
    Tensor f = relu(conv2d(in, p.conv1_w, p.conv1_b));
    PixelFeatures px;
    px.feat = conv2d(f, p.conv2_w, p.conv2_b);
    return px;
}

std::vector<Tensor> decoder_param_list(DecoderParams& p) {
    std::vector<Tensor> out;
    collect_single(out, p.occluder);
    collect_single(out, p.occludee);
    out.insert(out.end(),
               {p.derive_mlp.w1, p.derive_mlp.b1, p.derive_mlp.w2, p.derive_mlp.b2});
    return out;
}

std::vector<Tensor> stem_param_list(StemParams& p) {
    return {p.conv1_w, p.conv1_b, p.conv2_w, p.conv2_b};
}

void register_decoder(Checkpoint& ck, const DecoderParams& p, const TransformerConfig&) {
    register_single(ck, "occluder", p.occluder);
    register_single(ck, "occludee", p.occludee);
    ck.add("derive.w1", p.derive_mlp.w1);
    ck.add("derive.b1", p.derive_mlp.b1);
    ck.add("derive.w2", p.derive_mlp.w2);
    ck.add("derive.b2", p.derive_mlp.b2);
}

DecoderParams load_decoder(const Checkpoint& ck, const TransformerConfig& cfg) {
    DecoderParams p;
    p.occluder = load_single(ck, "occluder", cfg.layers);
    p.occludee = load_single(ck, "occludee", cfg.layers);
    p.derive_mlp.w1 = ck.get("derive.w1");
    p.derive_mlp.b1 = ck.get("derive.b1");
    p.derive_mlp.w2 = ck.get("derive.w2");
    p.derive_mlp.b2 = ck.get("derive.b2");
    return p;
}

namespace {

Tensor mlp2(const Tensor& x, const MlpParams& mlp) {
    return linear(relu(linear(x, mlp.w1, mlp.b1)), mlp.w2, mlp.b2);
}

}  // namespace

Tensor derive_occluder_queries(const Tensor& occludee_q, const MlpParams& mlp) {
    return mlp2(occludee_q, mlp);
}

Tensor mask_from_queries(const Tensor& queries, const PixelFeatures& px,
                         const MlpParams& mask_mlp) {
    Tensor embed = mlp2(queries, mask_mlp);
    const std::size_t d = px.feat.dim(0);
    Tensor flat = reshape(px.feat, {d, px.h() * px.w()});
    return matmul(embed, flat);
}

namespace {

Tensor attention(const Tensor& queries, const Tensor& keys_src, const AttentionParams& p,
                 const std::vector<std::uint8_t>* attn_mask) {
    const std::size_t d = queries.dim(1);
    Tensor q = linear(queries, p.wq, p.bq);
    Tensor k = linear(keys_src, p.wk, p.bk);
    Tensor v = linear(keys_src, p.wv, p.bv);
    Tensor logits = scale(matmul(q, transpose2d(k)), 1.0 / std::sqrt(double(d)));
    if (attn_mask && !attn_mask->empty()) {
        const std::size_t rows = logits.dim(0), cols = logits.dim(1);
        std::vector<double> bias(rows * cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            bool any = false;
            for (std::size_t c = 0; c < cols; ++c) any = any || (*attn_mask)[r * cols + c];
            if (!any) continue;  // all-false row falls back to attend-everywhere
            for (std::size_t c = 0; c < cols; ++c)
                if (!(*attn_mask)[r * cols + c]) bias[r * cols + c] = kMaskedLogit;
        }
        logits = add(logits, Tensor::from_data({rows, cols}, std::move(bias)));
    }
    Tensor attn = softmax_lastdim(logits);
    Tensor out = linear(matmul(attn, v), p.wo, p.bo);
    return layer_norm(add(queries, out), p.ln_gain, p.ln_bias);
}

Tensor ffn_block(const Tensor& x, const FfnParams& p) {
    Tensor h = relu(linear(x, p.w1, p.b1));
    Tensor out = linear(h, p.w2, p.b2);
    return layer_norm(add(x, out), p.ln_gain, p.ln_bias);
}

std::vector<std::uint8_t> threshold_mask(const Tensor& mask_logits) {
    // sigmoid(z) >= 0.5 iff z >= 0; track how close probabilities sit to the
    // threshold so gradient-check tests can reject flippable inputs
    const auto& v = mask_logits.value();
    std::vector<std::uint8_t> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double prob = 1.0 / (1.0 + std::exp(-v[i]));
        g_attn_margin = std::min(g_attn_margin, std::abs(prob - 0.5));
        out[i] = prob >= 0.5 ? 1 : 0;
    }
    return out;
}

}  // namespace

Tensor decoder_layer(const Tensor& queries, const PixelFeatures& px,
                     const std::vector<std::uint8_t>& attn_mask, const DecoderLayerParams& p) {
    const std::size_t d = px.feat.dim(0);
    Tensor pixels = transpose2d(reshape(px.feat, {d, px.h() * px.w()}));  // [HW,D]
    Tensor x = attention(queries, pixels, p.cross, &attn_mask);
    x = attention(x, x, p.self_attn, nullptr);
    return ffn_block(x, p.ffn);
}

SingleDecodeOutput decode_stack(const Tensor& queries, const PixelFeatures& px,
                                const SingleDecoderParams& p) {
    Tensor e = queries;
    for (const auto& layer : p.layers) {
        std::vector<std::uint8_t> attn_mask = threshold_mask(mask_from_queries(e, px, p.mask_mlp));
        e = decoder_layer(e, px, attn_mask, layer);
    }
    SingleDecodeOutput out;
    out.embed = e;
    out.mask_logits = mask_from_queries(e, px, p.mask_mlp);
    out.class_logits = linear(e, p.class_w, p.class_b);
    return out;
}

DecodeOutput bilayer_decode(QuerySet& qs, const PixelFeatures& px, const DecoderParams& p,
                            bool guidance) {
    qs.occluder_q = derive_occluder_queries(qs.occludee_q, p.derive_mlp);
    DecodeOutput out;
    out.occluder = decode_stack(qs.occluder_q, px, p.occluder);
    Tensor start = guidance ? add(qs.occludee_q, out.occluder.embed) : qs.occludee_q;
    out.occludee = decode_stack(start, px, p.occludee);
    return out;
}

void reset_attn_threshold_margin() { g_attn_margin = std::numeric_limits<double>::infinity(); }
double attn_threshold_margin() { return g_attn_margin; }

// ---- matching ---------------------------------------------------------------------

MatchResult hungarian_match(const std::vector<std::vector<double>>& cost) {
    const std::size_t gt_n = cost.empty() ? 0 : cost[0].size();
    const std::size_t q_n = cost.size();
    if (gt_n > q_n)
        throw ContractError("hungarian_match: more ground truths than queries");
    for (const auto& row : cost)
        for (double c : row)
            if (!std::isfinite(c)) throw DomainError("hungarian_match: non-finite cost entry");

    MatchResult res;
    res.query_to_gt.assign(q_n, -1);
    res.gt_to_query.assign(gt_n, -1);
    if (gt_n == 0) return res;

    // Shortest augmenting path over ground-truth rows; among equally short
    // paths the lowest query (column) index wins, scanned in ascending order.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(gt_n + 1, 0.0), v(q_n + 1, 0.0);
    std::vector<std::size_t> p(q_n + 1, 0), way(q_n + 1, 0);
    for (std::size_t i = 1; i <= gt_n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(q_n + 1, inf);
        std::vector<bool> used(q_n + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= q_n; ++j) {
                if (used[j]) continue;
                const double cur = cost[j - 1][i0 - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= q_n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    for (std::size_t j = 1; j <= q_n; ++j) {
        if (p[j] == 0) continue;
        res.query_to_gt[j - 1] = int(p[j] - 1);
        res.gt_to_query[p[j] - 1] = int(j - 1);
        res.total_cost += cost[j - 1][p[j] - 1];
    }
    return res;
}

MatchResult copy_assignment(const MatchResult& m) { return m; }

// ---- losses ------------------------------------------------------------------------

namespace {

std::vector<double> mask_target_flat(const BinaryMask& m, std::size_t h, std::size_t w) {
    BinaryMask r = (std::size_t(m.h) == h && std::size_t(m.w) == w)
                       ? m
                       : resize_mask_area(m, int(h), int(w));
    std::vector<double> out(r.px.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = r.px[i];
    return out;
}

double bce_mean_raw(const double* z, const double* t, std::size_t n) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
        s += std::max(z[i], 0.0) - z[i] * t[i] + std::log1p(std::exp(-std::abs(z[i])));
    return s / double(n);
}

double dice_raw(const double* z, const double* t, std::size_t n) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-z[i]));
        num += p * t[i];
        den += p + t[i];
    }
    return 1.0 - (2.0 * num + 1.0) / (den + 1.0);
}

double nll_raw(const double* row, std::size_t c, int target) {
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    return mx + std::log(sum) - row[target];
}

}  // namespace

std::vector<std::vector<double>> matching_cost(const SingleDecodeOutput& occludee_out,
                                               const std::vector<SetGt>& gts, std::size_t grid_h,
                                               std::size_t grid_w) {
    const std::size_t q = occludee_out.mask_logits.dim(0);
    const std::size_t hw = grid_h * grid_w;
    const std::size_t nc = occludee_out.class_logits.dim(1);
    std::vector<std::vector<double>> cost(q, std::vector<double>(gts.size(), 0.0));
    std::vector<std::vector<double>> targets;
    targets.reserve(gts.size());
    for (const auto& gt : gts) targets.push_back(mask_target_flat(gt.occludee_mask, grid_h, grid_w));
    for (std::size_t i = 0; i < q; ++i) {
        const double* mrow = occludee_out.mask_logits.value().data() + i * hw;
        const double* crow = occludee_out.class_logits.value().data() + i * nc;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            cost[i][g] = nll_raw(crow, nc, gts[g].class_id) +
                         bce_mean_raw(mrow, targets[g].data(), hw) +
                         dice_raw(mrow, targets[g].data(), hw);
        }
    }
    return cost;
}

SetLossParts set_loss(const DecodeOutput& out, const std::vector<SetGt>& gts,
                      const MatchResult& m, std::size_t grid_h, std::size_t grid_w,
                      const Tensor& box_preds) {
    const std::size_t q = out.occludee.mask_logits.dim(0);
    const std::size_t hw = grid_h * grid_w;
    const std::size_t nc = out.occludee.class_logits.dim(1);
    const int no_object = int(nc) - 1;
    if (m.query_to_gt.size() != q) throw ContractError("set_loss: assignment size mismatch");

    // class targets on both sides; occluders of unoccluded objects are empty
    // and supervise "no object"
    std::vector<int> occludee_cls(q, no_object), occluder_cls(q, no_object);
    std::vector<std::size_t> matched_rows;
    std::vector<int> matched_gt;
    for (std::size_t i = 0; i < q; ++i) {
        const int g = m.query_to_gt[i];
        if (g < 0) continue;
        matched_rows.push_back(i);
        matched_gt.push_back(g);
        occludee_cls[i] = gts[g].class_id;
        occluder_cls[i] = gts[g].occluder_mask.empty_mask() ? no_object : gts[g].class_id;
    }

    SetLossParts parts;
    parts.class_occludee = cross_entropy_rows(out.occludee.class_logits, occludee_cls);
    parts.class_occluder = cross_entropy_rows(out.occluder.class_logits, occluder_cls);

    std::vector<double> occludee_t, occluder_t;
    occludee_t.reserve(matched_rows.size() * hw);
    occluder_t.reserve(matched_rows.size() * hw);
    for (int g : matched_gt) {
        auto a = mask_target_flat(gts[g].occludee_mask, grid_h, grid_w);
        auto b = mask_target_flat(gts[g].occluder_mask, grid_h, grid_w);
        occludee_t.insert(occludee_t.end(), a.begin(), a.end());
        occluder_t.insert(occluder_t.end(), b.begin(), b.end());
    }
    if (!matched_rows.empty()) {
        Tensor occludee_ml = gather_rows(out.occludee.mask_logits, matched_rows);
        Tensor occludee_tt = Tensor::from_data({matched_rows.size(), hw}, occludee_t);
        Tensor occluder_ml = gather_rows(out.occluder.mask_logits, matched_rows);
        Tensor occluder_tt = Tensor::from_data({matched_rows.size(), hw}, occluder_t);
        const double n = double(matched_rows.size());
        parts.mask_bce = add(scale(bce_with_logits(occludee_ml, occludee_tt), n),
                             scale(bce_with_logits(occluder_ml, occluder_tt), n));
        auto dice_of = [&](const Tensor& logits, const Tensor& targets) {
            Tensor p = sigmoid(logits);
            Tensor num = add_const(scale(sum_lastdim(mul(p, targets)), 2.0), 1.0);
            Tensor den = add_const(add(sum_lastdim(p), sum_lastdim(targets)), 1.0);
            return sub(Tensor::scalar(n), sum_all(div(num, den)));
        };
        parts.dice = add(dice_of(occludee_ml, occludee_tt), dice_of(occluder_ml, occluder_tt));
    } else {
        parts.mask_bce = Tensor::scalar(0.0);
        parts.dice = Tensor::scalar(0.0);
    }

    parts.total = add(add(parts.class_occludee, parts.class_occluder),
                      add(parts.mask_bce, parts.dice));

    if (box_preds.defined() && !matched_rows.empty()) {
        if (box_preds.dim(0) != q || box_preds.dim(1) != 4)
            throw DimensionError("set_loss: box predictions must be [Q,4]");
        Tensor pred = gather_rows(box_preds, matched_rows);  // sigmoid cxcywh in [0,1]
        std::vector<double> gt_flat;
        for (int g : matched_gt) {
            const Box& b = gts[g].box;
            gt_flat.insert(gt_flat.end(),
                           {(b.x + b.w / 2) / double(grid_w), (b.y + b.h / 2) / double(grid_h),
                            b.w / double(grid_w), b.h / double(grid_h)});
        }
        Tensor gt = Tensor::from_data({matched_rows.size(), 4}, gt_flat);
        Tensor diff = sub(pred, gt);
        Tensor l1 = sum_all(add(relu(diff), relu(neg(diff))));
        parts.box_l1 = l1;

        auto col = [](const Tensor& t, std::size_t c) { return slice_cols(t, c, c + 1); };
        auto emin = [](const Tensor& a, const Tensor& b) { return sub(a, relu(sub(a, b))); };
        auto emax = [](const Tensor& a, const Tensor& b) { return add(a, relu(sub(b, a))); };
        auto corners = [&](const Tensor& b) {
            Tensor cx = col(b, 0), cy = col(b, 1), w = col(b, 2), h = col(b, 3);
            Tensor hw2 = scale(w, 0.5), hh2 = scale(h, 0.5);
            return std::array<Tensor, 4>{sub(cx, hw2), sub(cy, hh2), add(cx, hw2), add(cy, hh2)};
        };
        auto pc = corners(pred);
        auto gc = corners(gt);
        Tensor iw = relu(sub(emin(pc[2], gc[2]), emax(pc[0], gc[0])));
        Tensor ih = relu(sub(emin(pc[3], gc[3]), emax(pc[1], gc[1])));
        Tensor inter = mul(iw, ih);
        Tensor area_p = mul(relu(sub(pc[2], pc[0])), relu(sub(pc[3], pc[1])));
        Tensor area_g = mul(relu(sub(gc[2], gc[0])), relu(sub(gc[3], gc[1])));
        Tensor uni = add_const(sub(add(area_p, area_g), inter), 1e-9);
        Tensor iou = div(inter, uni);
        parts.box_iou = sub(Tensor::scalar(double(matched_rows.size())), sum_all(iou));
        parts.total = add(parts.total, add(parts.box_l1, parts.box_iou));
    }
    return parts;
}

}  // namespace bilayer
