#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "bilayer/png_io.hpp"
#include "bilayer/shapes_bench.hpp"

namespace bilayer {

using nlohmann::json;

std::string variant_name(BenchVariant v) {
    switch (v) {
        case BenchVariant::SingleFcn: return "single-fcn";
        case BenchVariant::SingleGcn: return "single-gcn";
        case BenchVariant::BilayerFcn: return "bilayer-fcn";
        case BenchVariant::BilayerGcn: return "bilayer-gcn";
        case BenchVariant::TransformerSingle: return "transformer-single";
        case BenchVariant::TransformerBilayer: return "transformer-bilayer";
    }
    throw ContractError("variant_name: unknown variant");
}

BenchVariant variant_from_name(const std::string& name) {
    for (BenchVariant v : {BenchVariant::SingleFcn, BenchVariant::SingleGcn,
                           BenchVariant::BilayerFcn, BenchVariant::BilayerGcn,
                           BenchVariant::TransformerSingle, BenchVariant::TransformerBilayer})
        if (variant_name(v) == name) return v;
    throw ConfigError("unknown variant '" + name + "'");
}

bool is_transformer(BenchVariant v) {
    return v == BenchVariant::TransformerSingle || v == BenchVariant::TransformerBilayer;
}

namespace {

bool is_bilayer_conv(BenchVariant v) {
    return v == BenchVariant::BilayerFcn || v == BenchVariant::BilayerGcn;
}

HeadVariant conv_kind(BenchVariant v) {
    return (v == BenchVariant::SingleGcn || v == BenchVariant::BilayerGcn) ? HeadVariant::GCN
                                                                           : HeadVariant::FCN;
}

}  // namespace

HeadModel HeadModel::init(BenchVariant variant, const HeadConfig& head_cfg,
                          const TransformerConfig& tf_cfg, std::uint64_t seed) {
    HeadModel m;
    m.variant = variant;
    m.head_cfg = head_cfg;
    m.head_cfg.variant = conv_kind(variant);
    m.head_cfg.bilayer = is_bilayer_conv(variant);
    m.tf_cfg = tf_cfg;
    Rng rng = derive_rng(seed, 7);
    if (!is_transformer(variant)) {
        const std::size_t k = head_cfg.channels;
        const double s = std::sqrt(2.0 / (3.0 * 9.0));
        m.stem_w = Tensor::randn({k, 3, 3, 3}, rng, s, true);
        m.stem_b = Tensor::zeros({k}, true);
        if (m.head_cfg.bilayer) m.occluder = init_branch(m.head_cfg, rng, true);
        m.occludee = init_branch(m.head_cfg, rng, false);
    } else {
        m.tf_stem = init_stem(tf_cfg.dim, rng);
        m.queries = init_queries(tf_cfg, rng);
        m.decoder = init_decoder(tf_cfg, rng);
        m.box_w = Tensor::randn({tf_cfg.dim, 4}, rng, std::sqrt(1.0 / double(tf_cfg.dim)), true);
        m.box_b = Tensor::zeros({4}, true);
    }
    return m;
}

std::vector<Tensor> HeadModel::params() {
    std::vector<Tensor> out;
    if (!is_transformer(variant)) {
        out.push_back(stem_w);
        out.push_back(stem_b);
        if (head_cfg.bilayer) {
            auto a = branch_params(occluder, head_cfg.variant, true);
            out.insert(out.end(), a.begin(), a.end());
        }
        auto b = branch_params(occludee, head_cfg.variant, false);
        out.insert(out.end(), b.begin(), b.end());
    } else {
        auto s = stem_param_list(tf_stem);
        out.insert(out.end(), s.begin(), s.end());
        out.push_back(queries.occludee_q);
        if (variant == BenchVariant::TransformerBilayer) {
            auto d = decoder_param_list(decoder);
            out.insert(out.end(), d.begin(), d.end());
        } else {
            std::vector<Tensor> d;
            // single decoder: only the occludee stack is live
            DecoderParams& p = decoder;
            for (auto& l : p.occludee.layers) {
                for (AttentionParams* a : {&l.cross, &l.self_attn})
                    d.insert(d.end(), {a->wq, a->bq, a->wk, a->bk, a->wv, a->bv, a->wo, a->bo,
                                       a->ln_gain, a->ln_bias});
                d.insert(d.end(),
                         {l.ffn.w1, l.ffn.b1, l.ffn.w2, l.ffn.b2, l.ffn.ln_gain, l.ffn.ln_bias});
            }
            d.insert(d.end(), {p.occludee.mask_mlp.w1, p.occludee.mask_mlp.b1,
                               p.occludee.mask_mlp.w2, p.occludee.mask_mlp.b2, p.occludee.class_w,
                               p.occludee.class_b});
            out.insert(out.end(), d.begin(), d.end());
        }
        out.push_back(box_w);
        out.push_back(box_b);
    }
    return out;
}

std::size_t HeadModel::param_count() {
    std::size_t n = 0;
    for (const Tensor& t : params()) n += t.numel();
    return n;
}

Checkpoint HeadModel::to_checkpoint() const {
    Checkpoint ck;
    ck.add("meta.variant", Tensor::scalar(double(int(variant))));
    ck.add("meta.channels", Tensor::scalar(double(head_cfg.channels)));
    ck.add("meta.att_dim", Tensor::scalar(double(head_cfg.att_dim)));
    ck.add("meta.roi", Tensor::scalar(double(head_cfg.roi)));
    ck.add("meta.queries", Tensor::scalar(double(tf_cfg.queries)));
    ck.add("meta.dim", Tensor::scalar(double(tf_cfg.dim)));
    ck.add("meta.layers", Tensor::scalar(double(tf_cfg.layers)));
    ck.add("meta.ffn_dim", Tensor::scalar(double(tf_cfg.ffn_dim)));
    ck.add("meta.classes", Tensor::scalar(double(tf_cfg.classes)));
    if (!is_transformer(variant)) {
        ck.add("stem.w", stem_w);
        ck.add("stem.b", stem_b);
        if (head_cfg.bilayer) register_branch(ck, "occluder", occluder, head_cfg.variant, true);
        register_branch(ck, "occludee", occludee, head_cfg.variant, false);
    } else {
        ck.add("stem.conv1.w", tf_stem.conv1_w);
        ck.add("stem.conv1.b", tf_stem.conv1_b);
        ck.add("stem.conv2.w", tf_stem.conv2_w);
        ck.add("stem.conv2.b", tf_stem.conv2_b);
        ck.add("queries.occludee", queries.occludee_q);
        Checkpoint dec;
        register_decoder(dec, decoder, tf_cfg);
        for (const auto& [name, t] : dec.entries()) ck.add(name, t);
        ck.add("box.w", box_w);
        ck.add("box.b", box_b);
    }
    return ck;
}

HeadModel HeadModel::from_checkpoint(const Checkpoint& ck) {
    HeadModel m;
    m.variant = BenchVariant(int(ck.get_scalar("meta.variant")));
    m.head_cfg.channels = std::size_t(ck.get_scalar("meta.channels"));
    m.head_cfg.att_dim = std::size_t(ck.get_scalar("meta.att_dim"));
    m.head_cfg.roi = std::size_t(ck.get_scalar("meta.roi"));
    m.head_cfg.variant = conv_kind(m.variant);
    m.head_cfg.bilayer = is_bilayer_conv(m.variant);
    m.tf_cfg.queries = std::size_t(ck.get_scalar("meta.queries"));
    m.tf_cfg.dim = std::size_t(ck.get_scalar("meta.dim"));
    m.tf_cfg.layers = std::size_t(ck.get_scalar("meta.layers"));
    m.tf_cfg.ffn_dim = std::size_t(ck.get_scalar("meta.ffn_dim"));
    m.tf_cfg.classes = std::size_t(ck.get_scalar("meta.classes"));
    if (!is_transformer(m.variant)) {
        m.stem_w = ck.get("stem.w");
        m.stem_b = ck.get("stem.b");
        if (m.head_cfg.bilayer) m.occluder = load_branch(ck, "occluder", m.head_cfg.variant, true);
        m.occludee = load_branch(ck, "occludee", m.head_cfg.variant, false);
    } else {
        m.tf_stem.conv1_w = ck.get("stem.conv1.w");
        m.tf_stem.conv1_b = ck.get("stem.conv1.b");
        m.tf_stem.conv2_w = ck.get("stem.conv2.w");
        m.tf_stem.conv2_b = ck.get("stem.conv2.b");
        m.queries.occludee_q = ck.get("queries.occludee");
        m.queries.q_count = m.tf_cfg.queries;
        m.queries.dim = m.tf_cfg.dim;
        m.decoder = load_decoder(ck, m.tf_cfg);
        m.box_w = ck.get("box.w");
        m.box_b = ck.get("box.b");
    }
    return m;
}

HeadOutput HeadModel::forward_roi_bilayer(const Tensor& roi_rgb) const {
    Tensor x = relu(conv2d(roi_rgb, stem_w, stem_b));
    return forward_bilayer(x, occluder, occludee, head_cfg.variant);
}

BranchOutput HeadModel::forward_roi_single(const Tensor& roi_rgb) const {
    Tensor x = relu(conv2d(roi_rgb, stem_w, stem_b));
    return forward_single(x, occludee, head_cfg.variant);
}

// ---- training ----------------------------------------------------------------------

namespace {

struct RoiExample {
    Tensor roi;  // [3,R,R]
    OcclusionPair pair;
};

std::vector<RoiExample> build_roi_pool(const std::vector<ShapeScene>& dataset, std::size_t roi,
                                       double occlusion_fraction, Rng& balance_rng) {
    std::vector<OcclusionPair> pairs;
    std::vector<Tensor> rois;
    for (const auto& scene : dataset) {
        const FloatGrid grid = image_to_grid(scene.image);
        for (const auto& inst : scene.ann.instances) {
            if (inst.bbox.w < 1 || inst.bbox.h < 1) continue;
            OcclusionPair p = derive_pair_modal(scene.ann, inst.id);
            FloatGrid crop = roi_crop(grid, p.roi_box, int(roi), int(roi));
            rois.push_back(Tensor::from_data({3, roi, roi}, crop.v));
            pairs.push_back(std::move(p));
        }
    }
    std::vector<OcclusionPair> balanced = balance_sample(pairs, balance_rng, occlusion_fraction);
    std::vector<RoiExample> pool;
    pool.reserve(balanced.size());
    for (const auto& bp : balanced) {
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            if (pairs[i].image_id == bp.image_id && pairs[i].target_id == bp.target_id) {
                pool.push_back({rois[i], bp});
                break;
            }
        }
    }
    return pool;
}

struct SceneExample {
    Tensor image;  // [3,S,S]
    std::vector<SetGt> gts;
    std::size_t h = 0, w = 0;
};

std::vector<SetGt> scene_set_gts(const SceneAnnotation& ann) {
    std::vector<SetGt> gts;
    for (const auto& inst : ann.instances) {
        SetGt gt;
        gt.class_id = inst.class_id;
        gt.occludee_mask = inst.modal_mask;
        gt.box = inst.bbox;
        BinaryMask uni(inst.modal_mask.h, inst.modal_mask.w);
        const int bx0 = int(inst.bbox.x), by0 = int(inst.bbox.y);
        const int bx1 = int(inst.bbox.x + inst.bbox.w), by1 = int(inst.bbox.y + inst.bbox.h);
        for (const auto& other : ann.instances) {
            if (other.id == inst.id) continue;
            bool touches = false;
            for (int y = std::max(0, by0); y < std::min(uni.h, by1) && !touches; ++y)
                for (int x = std::max(0, bx0); x < std::min(uni.w, bx1); ++x)
                    if (other.modal_mask.at(y, x)) {
                        touches = true;
                        break;
                    }
            if (touches) uni = mask_or(uni, other.modal_mask);
        }
        gt.occluder_mask = std::move(uni);
        gts.push_back(std::move(gt));
    }
    return gts;
}

std::vector<SceneExample> build_scene_pool(const std::vector<ShapeScene>& dataset) {
    std::vector<SceneExample> pool;
    pool.reserve(dataset.size());
    for (const auto& scene : dataset) {
        SceneExample e;
        const FloatGrid grid = image_to_grid(scene.image);
        e.image = Tensor::from_data(
            {3, std::size_t(scene.image.h), std::size_t(scene.image.w)}, grid.v);
        e.gts = scene_set_gts(scene.ann);
        e.h = std::size_t(scene.image.h);
        e.w = std::size_t(scene.image.w);
        pool.push_back(std::move(e));
    }
    return pool;
}

struct IterationLoss {
    Tensor total;
    std::vector<double> components;
};

IterationLoss conv_example_loss(const HeadModel& m, const RoiExample& ex, const LossWeights& w) {
    IterationLoss out;
    if (m.head_cfg.bilayer) {
        HeadOutput ho = m.forward_roi_bilayer(ex.roi);
        HeadLosses l = head_losses(ho, ex.pair, w);
        out.total = l.total;
        out.components = {l.occluder_boundary.item(), l.occluder_mask.item(),
                          l.occludee_boundary.item(), l.occludee_mask.item()};
    } else {
        BranchOutput bo = m.forward_roi_single(ex.roi);
        HeadLosses l = single_losses(bo, ex.pair, w);
        out.total = l.total;
        out.components = {l.occludee_boundary.item(), l.occludee_mask.item()};
    }
    return out;
}

IterationLoss transformer_example_loss(HeadModel& m, const SceneExample& ex) {
    PixelFeatures px = run_stem(ex.image, m.tf_stem);
    IterationLoss out;
    if (m.variant == BenchVariant::TransformerBilayer) {
        DecodeOutput dec = bilayer_decode(m.queries, px, m.decoder, true);
        MatchResult match = hungarian_match(matching_cost(dec.occludee, ex.gts, ex.h, ex.w));
        MatchResult occluder_match = copy_assignment(match);
        (void)occluder_match;  // identical by contract; the loss reads `match`
        Tensor box_preds = sigmoid(linear(dec.occludee.embed, m.box_w, m.box_b));
        SetLossParts parts = set_loss(dec, ex.gts, match, ex.h, ex.w, box_preds);
        out.total = parts.total;
        out.components = {parts.class_occludee.item(), parts.class_occluder.item(),
                          parts.mask_bce.item(),       parts.dice.item(),
                          parts.box_l1.item(),         parts.box_iou.item()};
    } else {
        SingleDecodeOutput dec = decode_stack(m.queries.occludee_q, px, m.decoder.occludee);
        MatchResult match = hungarian_match(matching_cost(dec, ex.gts, ex.h, ex.w));
        // occludee-side half of the set loss
        DecodeOutput both;
        both.occludee = dec;
        both.occluder = dec;
        Tensor box_preds = sigmoid(linear(dec.embed, m.box_w, m.box_b));
        SetLossParts parts = set_loss(both, ex.gts, match, ex.h, ex.w, box_preds);
        // drop the duplicated occluder terms from the reported total
        Tensor total = add(parts.class_occludee, add(parts.box_l1, parts.box_iou));
        // mask terms cover both sides; recompute the occludee-only half
        std::vector<std::size_t> rows;
        std::vector<int> matched_gt;
        for (std::size_t i = 0; i < match.query_to_gt.size(); ++i)
            if (match.query_to_gt[i] >= 0) {
                rows.push_back(i);
                matched_gt.push_back(match.query_to_gt[i]);
            }
        Tensor mask_bce = Tensor::scalar(0.0), dice = Tensor::scalar(0.0);
        if (!rows.empty()) {
            std::vector<double> tflat;
            for (int g : matched_gt) {
                BinaryMask r = ex.gts[g].occludee_mask;
                for (std::uint8_t p : r.px) tflat.push_back(double(p));
            }
            Tensor logits = gather_rows(dec.mask_logits, rows);
            Tensor targets = Tensor::from_data({rows.size(), ex.h * ex.w}, tflat);
            mask_bce = scale(bce_with_logits(logits, targets), double(rows.size()));
            Tensor p = sigmoid(logits);
            Tensor num = add_const(scale(sum_lastdim(mul(p, targets)), 2.0), 1.0);
            Tensor den = add_const(add(sum_lastdim(p), sum_lastdim(targets)), 1.0);
            dice = sub(Tensor::scalar(double(rows.size())), sum_all(div(num, den)));
        }
        out.total = add(total, add(mask_bce, dice));
        out.components = {parts.class_occludee.item(), mask_bce.item(), dice.item(),
                          parts.box_l1.item(), parts.box_iou.item()};
    }
    return out;
}

std::vector<std::string> component_names(BenchVariant v) {
    if (is_transformer(v)) {
        if (v == BenchVariant::TransformerBilayer)
            return {"class_occludee", "class_occluder", "mask_bce", "dice", "box_l1", "box_iou"};
        return {"class_occludee", "mask_bce", "dice", "box_l1", "box_iou"};
    }
    if (is_bilayer_conv(v))
        return {"occluder_boundary", "occluder_mask", "occludee_boundary", "occludee_mask"};
    return {"occludee_boundary", "occludee_mask"};
}

}  // namespace

TrainResult train(const std::vector<ShapeScene>& dataset, const TrainConfig& cfg) {
    if (dataset.empty()) throw ContractError("train: dataset is empty");
    if (cfg.warmup_iterations > cfg.iterations)
        throw ConfigError("train: warmup exceeds total iterations");

    TrainResult res;
    res.model = HeadModel::init(cfg.variant, cfg.head_cfg, cfg.tf_cfg, cfg.seed);
    res.component_names = component_names(cfg.variant);
    std::vector<Tensor> params = res.model.params();
    std::vector<std::vector<double>> velocity(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) velocity[i].assign(params[i].numel(), 0.0);

    Rng balance_rng = derive_rng(cfg.seed, 2);
    std::vector<RoiExample> roi_pool;
    std::vector<SceneExample> scene_pool;
    if (is_transformer(cfg.variant)) {
        scene_pool = build_scene_pool(dataset);
    } else {
        roi_pool = build_roi_pool(dataset, cfg.head_cfg.roi, cfg.occlusion_fraction, balance_rng);
        if (roi_pool.empty()) throw ContractError("train: no usable ROI examples");
    }
    const std::size_t pool_size = is_transformer(cfg.variant) ? scene_pool.size() : roi_pool.size();

    Rng data_rng = derive_rng(cfg.seed, 1);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        const double lr = (it < cfg.warmup_iterations ? cfg.warmup_factor : 1.0) *
                          cfg.learning_rate;
        for (Tensor& p : params) {
            p.ensure_grad();
            p.zero_grad();
        }
        double total_value = 0;
        std::vector<double> comp_sums(res.component_names.size(), 0.0);
        {
            Tape tape;
            Tensor batch_sum;
            for (std::size_t b = 0; b < cfg.batch_size; ++b) {
                const std::size_t idx =
                    std::size_t(rand_int(data_rng, 0, std::int64_t(pool_size) - 1));
                IterationLoss l = is_transformer(cfg.variant)
                                      ? transformer_example_loss(res.model, scene_pool[idx])
                                      : conv_example_loss(res.model, roi_pool[idx],
                                                          cfg.loss_weights);
                batch_sum = batch_sum.defined() ? add(batch_sum, l.total) : l.total;
                for (std::size_t c = 0; c < comp_sums.size(); ++c) comp_sums[c] += l.components[c];
            }
            Tensor total = scale(batch_sum, 1.0 / double(cfg.batch_size));
            total_value = total.item();
            if (!std::isfinite(total_value))
                throw TrainingError("train: non-finite loss at iteration " + std::to_string(it));
            backward(total);
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& v = velocity[i];
            const auto& g = params[i].grad();
            auto& val = params[i].value();
            for (std::size_t j = 0; j < v.size(); ++j) {
                v[j] = cfg.momentum * v[j] + g[j];
                val[j] -= lr * v[j];
            }
        }
        LossRecord rec;
        rec.iteration = it;
        rec.total = total_value;
        for (double c : comp_sums) rec.components.push_back(c / double(cfg.batch_size));
        res.curve.push_back(std::move(rec));
    }
    res.final_loss = res.curve.empty() ? 0.0 : res.curve.back().total;
    return res;
}

void save_loss_curve_csv(const TrainResult& r, const std::string& path) {
    std::ostringstream os;
    os << "iteration,total";
    for (const auto& n : r.component_names) os << "," << n;
    os << "\n";
    char buf[64];
    for (const auto& rec : r.curve) {
        os << rec.iteration;
        std::snprintf(buf, sizeof(buf), ",%.10g", rec.total);
        os << buf;
        for (double c : rec.components) {
            std::snprintf(buf, sizeof(buf), ",%.10g", c);
            os << buf;
        }
        os << "\n";
    }
    write_file_atomic(path, os.str());
}

// ---- evaluation -----------------------------------------------------------------------

double average_precision(const std::vector<Detection>& dets,
                         const std::vector<std::vector<BinaryMask>>& gts, double iou_threshold) {
    std::size_t n_gt = 0;
    for (const auto& g : gts) n_gt += g.size();
    if (n_gt == 0 || dets.empty()) return 0.0;

    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

    std::vector<std::vector<bool>> taken(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].size(), false);

    std::vector<bool> tp(order.size(), false);
    for (std::size_t k = 0; k < order.size(); ++k) {
        const Detection& det = dets[order[k]];
        const auto& img_gts = gts[std::size_t(det.image_index)];
        double best = 0;
        int best_g = -1;
        for (std::size_t g = 0; g < img_gts.size(); ++g) {
            if (taken[std::size_t(det.image_index)][g]) continue;
            const double iou = mask_iou(det.mask, img_gts[g]);
            if (iou > best) {
                best = iou;
                best_g = int(g);
            }
        }
        if (best_g >= 0 && best >= iou_threshold) {
            tp[k] = true;
            taken[std::size_t(det.image_index)][std::size_t(best_g)] = true;
        }
    }

    // all-point interpolation over the precision envelope
    std::vector<double> precision(order.size()), recall(order.size());
    std::size_t tp_cum = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        if (tp[k]) ++tp_cum;
        precision[k] = double(tp_cum) / double(k + 1);
        recall[k] = double(tp_cum) / double(n_gt);
    }
    double ap = 0, env = 0;
    for (std::size_t k = order.size(); k-- > 0;) {
        env = std::max(env, precision[k]);
        const double r_prev = k == 0 ? 0.0 : recall[k - 1];
        if (recall[k] > r_prev) ap += (recall[k] - r_prev) * env;
    }
    return ap;
}

namespace {

BinaryMask prob_to_mask(const FloatGrid& prob, double thr) {
    BinaryMask m(prob.h, prob.w);
    for (int y = 0; y < prob.h; ++y)
        for (int x = 0; x < prob.w; ++x) m.at(y, x) = prob.at(0, y, x) >= thr ? 1 : 0;
    return m;
}

FloatGrid logits_to_prob(const Tensor& logits) {
    FloatGrid g(1, int(logits.dim(1)), int(logits.dim(2)));
    for (std::size_t i = 0; i < logits.numel(); ++i)
        g.v[i] = 1.0 / (1.0 + std::exp(-logits.value()[i]));
    return g;
}

}  // namespace

EvalResult evaluate(const HeadModel& model, const std::vector<ShapeScene>& dataset,
                    std::size_t max_dets) {
    const auto t0 = std::chrono::steady_clock::now();
    EvalResult res;
    std::vector<std::vector<BinaryMask>> gts(dataset.size());
    std::vector<Detection> dets;
    double iou_sum = 0;
    std::size_t iou_n = 0;
    double occluder_sum = 0;
    std::size_t occluder_n = 0;

    for (std::size_t si = 0; si < dataset.size(); ++si) {
        const ShapeScene& scene = dataset[si];
        for (const auto& inst : scene.ann.instances) gts[si].push_back(inst.modal_mask);
    }

    if (!is_transformer(model.variant)) {
        const std::size_t R = model.head_cfg.roi;
        for (std::size_t si = 0; si < dataset.size(); ++si) {
            const ShapeScene& scene = dataset[si];
            const FloatGrid grid = image_to_grid(scene.image);
            std::vector<Detection> scene_dets;
            for (const auto& inst : scene.ann.instances) {
                if (inst.bbox.w < 1 || inst.bbox.h < 1) continue;
                OcclusionPair pair = derive_pair_modal(scene.ann, inst.id);
                FloatGrid crop = roi_crop(grid, pair.roi_box, int(R), int(R));
                Tensor roi = Tensor::from_data({3, R, R}, crop.v);
                Tensor occludee_logits, occluder_logits;
                if (model.head_cfg.bilayer) {
                    HeadOutput out = model.forward_roi_bilayer(roi);
                    occludee_logits = out.occludee_mask_logits;
                    occluder_logits = out.occluder_mask_logits;
                } else {
                    BranchOutput out = model.forward_roi_single(roi);
                    occludee_logits = out.mask_logits;
                }
                const int bw = int(pair.roi_box.w), bh = int(pair.roi_box.h);
                const int bx = int(pair.roi_box.x), by = int(pair.roi_box.y);
                FloatGrid prob = resize_bilinear(logits_to_prob(occludee_logits), bh, bw);
                double mean_prob = 0;
                for (double v : prob.v) mean_prob += v;
                mean_prob /= double(prob.v.size());
                BinaryMask box_mask = prob_to_mask(prob, 0.5);
                BinaryMask full(scene.image.h, scene.image.w);
                for (int y = 0; y < bh; ++y)
                    for (int x = 0; x < bw; ++x)
                        if (box_mask.at(y, x) && by + y < full.h && bx + x < full.w &&
                            by + y >= 0 && bx + x >= 0)
                            full.at(by + y, bx + x) = 1;
                iou_sum += mask_iou(full, inst.modal_mask);
                ++iou_n;
                if (model.head_cfg.bilayer && pair.occluded()) {
                    FloatGrid oprob = resize_bilinear(logits_to_prob(occluder_logits), bh, bw);
                    occluder_sum += mask_iou(prob_to_mask(oprob, 0.5), pair.occluder_mask);
                    ++occluder_n;
                }
                scene_dets.push_back({int(si), mean_prob, std::move(full)});
            }
            if (scene_dets.size() > max_dets) {
                std::stable_sort(scene_dets.begin(), scene_dets.end(),
                                 [](const Detection& a, const Detection& b) {
                                     return a.score > b.score;
                                 });
                scene_dets.resize(max_dets);
            }
            for (auto& d : scene_dets) dets.push_back(std::move(d));
        }
    } else {
        for (std::size_t si = 0; si < dataset.size(); ++si) {
            const ShapeScene& scene = dataset[si];
            const FloatGrid grid = image_to_grid(scene.image);
            Tensor image = Tensor::from_data(
                {3, std::size_t(scene.image.h), std::size_t(scene.image.w)}, grid.v);
            HeadModel& m = const_cast<HeadModel&>(model);  // queries cache updated per forward
            PixelFeatures px = run_stem(image, m.tf_stem);
            SingleDecodeOutput occludee_out, occluder_out;
            bool has_occluder = false;
            if (model.variant == BenchVariant::TransformerBilayer) {
                DecodeOutput out = bilayer_decode(m.queries, px, m.decoder, true);
                occludee_out = out.occludee;
                occluder_out = out.occluder;
                has_occluder = true;
            } else {
                occludee_out = decode_stack(m.queries.occludee_q, px, m.decoder.occludee);
            }
            const std::size_t q = occludee_out.class_logits.dim(0);
            const std::size_t nc = occludee_out.class_logits.dim(1);
            const std::size_t hw = std::size_t(scene.image.h) * scene.image.w;
            std::vector<std::pair<double, std::size_t>> scored;
            for (std::size_t i = 0; i < q; ++i) {
                const double* row = occludee_out.class_logits.value().data() + i * nc;
                double mx = row[0];
                for (std::size_t c = 1; c < nc; ++c) mx = std::max(mx, row[c]);
                double denom = 0;
                for (std::size_t c = 0; c < nc; ++c) denom += std::exp(row[c] - mx);
                double best_real = 0;
                for (std::size_t c = 0; c + 1 < nc; ++c)
                    best_real = std::max(best_real, std::exp(row[c] - mx) / denom);
                scored.push_back({best_real, i});
            }
            std::stable_sort(scored.begin(), scored.end(),
                             [](const auto& a, const auto& b) { return a.first > b.first; });
            if (scored.size() > max_dets) scored.resize(max_dets);
            std::vector<std::size_t> kept;
            for (const auto& [score, qi] : scored) {
                BinaryMask m2(scene.image.h, scene.image.w);
                const double* logits = occludee_out.mask_logits.value().data() + qi * hw;
                for (std::size_t p = 0; p < hw; ++p) m2.px[p] = logits[p] >= 0 ? 1 : 0;
                dets.push_back({int(si), score, std::move(m2)});
                kept.push_back(qi);
            }
            // per-instance IoU: best kept detection per ground truth
            const auto set_gts = scene_set_gts(scene.ann);
            for (std::size_t g = 0; g < scene.ann.instances.size(); ++g) {
                double best = 0;
                std::size_t best_q = 0;
                for (std::size_t k = dets.size() - kept.size(); k < dets.size(); ++k) {
                    const double iou = mask_iou(dets[k].mask, scene.ann.instances[g].modal_mask);
                    if (iou > best) {
                        best = iou;
                        best_q = kept[k - (dets.size() - kept.size())];
                    }
                }
                iou_sum += best;
                ++iou_n;
                if (has_occluder && !set_gts[g].occluder_mask.empty_mask() && best > 0) {
                    BinaryMask om(scene.image.h, scene.image.w);
                    const double* logits = occluder_out.mask_logits.value().data() + best_q * hw;
                    for (std::size_t p = 0; p < hw; ++p) om.px[p] = logits[p] >= 0 ? 1 : 0;
                    occluder_sum += mask_iou(om, set_gts[g].occluder_mask);
                    ++occluder_n;
                }
            }
        }
    }

    res.instances = iou_n;
    res.mean_iou = iou_n ? iou_sum / double(iou_n) : 0.0;
    res.occluder_iou = occluder_n ? occluder_sum / double(occluder_n)
                                  : std::numeric_limits<double>::quiet_NaN();
    double ap_sum = 0;
    for (int t = 0; t < 10; ++t) {
        const double thr = 0.5 + 0.05 * t;
        const double ap = average_precision(dets, gts, thr);
        if (t == 0) res.ap50 = ap;
        ap_sum += ap;
    }
    res.ap = ap_sum / 10.0;
    res.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

// ---- comparison ------------------------------------------------------------------------

CompareReport compare_variants(const std::vector<BenchVariant>& variants,
                               const std::vector<std::uint64_t>& seeds,
                               const std::vector<ShapeScene>& train_scenes,
                               const std::vector<ShapeScene>& eval_scenes, TrainConfig cfg,
                               std::size_t jobs) {
    const auto t0 = std::chrono::steady_clock::now();
    struct Cell {
        BenchVariant variant;
        std::uint64_t seed;
        EvalResult result;
        std::size_t params = 0;
    };
    std::vector<Cell> cells;
    for (BenchVariant v : variants)
        for (std::uint64_t s : seeds) cells.push_back({v, s, {}, 0});

    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            TrainConfig run_cfg = cfg;
            run_cfg.variant = cells[i].variant;
            run_cfg.seed = cells[i].seed;
            TrainResult tr = train(train_scenes, run_cfg);
            cells[i].params = tr.model.param_count();
            cells[i].result = evaluate(tr.model, eval_scenes);
        }
    };
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (std::size_t j = 0; j < jobs; ++j) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }

    CompareReport report;
    for (BenchVariant v : variants) {
        VariantReport row;
        row.variant = v;
        row.seeds = seeds;
        for (const Cell& c : cells)
            if (c.variant == v) {
                row.per_seed.push_back(c.result);
                row.param_count = c.params;
            }
        auto stats = [](const std::vector<double>& xs) {
            double mean = 0;
            for (double x : xs) mean += x;
            mean /= double(xs.size());
            double var = 0;
            for (double x : xs) var += (x - mean) * (x - mean);
            var = xs.size() > 1 ? var / double(xs.size() - 1) : 0.0;
            return std::pair<double, double>(mean, std::sqrt(var));
        };
        std::vector<double> ious, aps, ap50s;
        for (const auto& r : row.per_seed) {
            ious.push_back(r.mean_iou);
            aps.push_back(r.ap);
            ap50s.push_back(r.ap50);
        }
        std::tie(row.mean_iou, row.sd_iou) = stats(ious);
        std::tie(row.mean_ap, row.sd_ap) = stats(aps);
        row.mean_ap50 = stats(ap50s).first;
        report.rows.push_back(std::move(row));
    }
    report.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

std::string compare_table_text(const CompareReport& report) {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof(line), "%-14s %-6s %10s %16s %14s %8s\n", "Structure", "Net",
                  "Params", "IoU(mean+-sd)", "AP(mean+-sd)", "AP50");
    os << line;
    os << std::string(72, '-') << "\n";
    for (const auto& row : report.rows) {
        const std::string name = variant_name(row.variant);
        std::string structure, net;
        if (is_transformer(row.variant)) {
            structure = row.variant == BenchVariant::TransformerBilayer ? "Bilayer" : "Single";
            net = "Query";
        } else {
            structure = name.rfind("bilayer", 0) == 0 ? "Bilayer" : "Single Layer";
            net = name.find("gcn") != std::string::npos ? "GCN" : "FCN";
        }
        std::snprintf(line, sizeof(line), "%-14s %-6s %10zu %8.4f+-%.4f %7.4f+-%.4f %8.4f\n",
                      structure.c_str(), net.c_str(), row.param_count, row.mean_iou, row.sd_iou,
                      row.mean_ap, row.sd_ap, row.mean_ap50);
        os << line;
    }
    return os.str();
}

std::string compare_report_json(const CompareReport& report) {
    json rows = json::array();
    // timing is deliberately left out: report files must be byte-identical
    // across reruns with the same seed
    for (const auto& row : report.rows) {
        json per_seed = json::array();
        for (std::size_t i = 0; i < row.per_seed.size(); ++i) {
            const EvalResult& r = row.per_seed[i];
            per_seed.push_back({{"seed", row.seeds[i]},
                                {"mean_iou", r.mean_iou},
                                {"ap", r.ap},
                                {"ap50", r.ap50},
                                {"occluder_iou", std::isnan(r.occluder_iou)
                                                     ? json(nullptr)
                                                     : json(r.occluder_iou)},
                                {"instances", r.instances}});
        }
        rows.push_back({{"variant", variant_name(row.variant)},
                        {"params", row.param_count},
                        {"per_seed", per_seed},
                        {"mean_iou", row.mean_iou},
                        {"sd_iou", row.sd_iou},
                        {"mean_ap", row.mean_ap},
                        {"sd_ap", row.sd_ap},
                        {"mean_ap50", row.mean_ap50}});
    }
    json root = {{"rows", rows}};
    return root.dump(2) + "\n";
}

}  // namespace bilayer
