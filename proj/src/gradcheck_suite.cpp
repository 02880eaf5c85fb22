#include "bilayer/gradcheck_suite.hpp"

#include <cmath>
#include <functional>

#include "bilayer/mask_head.hpp"
#include "bilayer/transformer.hpp"

namespace bilayer {

namespace {

// Fixed random projection turns a tensor-valued op into a scalar function so
// its whole Jacobian is exercised, not just the gradient of a plain sum.
Tensor project(const Tensor& t, const Tensor& weights) {
    return sum_all(mul(t, weights));
}

struct Trial {
    std::vector<Tensor> params;
    std::function<Tensor()> f;
};

using TrialGen = std::function<Trial(Rng&)>;

double run_trials(const TrialGen& gen, std::size_t trials, Rng& rng, double eps = 1e-5) {
    double worst = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        Trial trial;
        // reject inputs whose relu pre-activations or attention-mask
        // probabilities sit within the FD step of their kink
        for (int attempt = 0; attempt < 50; ++attempt) {
            trial = gen(rng);
            reset_kink_margin();
            reset_attn_threshold_margin();
            (void)trial.f().item();
            if (kink_margin() > 1e-3 && attn_threshold_margin() > 1e-3) break;
        }
        worst = std::max(worst, grad_check(trial.f, trial.params, eps));
    }
    return worst;
}

OcclusionPair random_pair(Rng& rng, int h, int w) {
    OcclusionPair pair;
    pair.occludee_mask = BinaryMask(h, w);
    pair.occluder_mask = BinaryMask(h, w);
    for (int i = 0; i < h * w; ++i) {
        pair.occludee_mask.px[i] = rand_int(rng, 0, 1);
        pair.occluder_mask.px[i] = rand_int(rng, 0, 1);
    }
    pair.occludee_boundary = boundary_gt(pair.occludee_mask);
    pair.occluder_boundary = boundary_gt(pair.occluder_mask);
    pair.roi_box = Box{0, 0, double(w), double(h)};
    return pair;
}

}  // namespace

GradCheckReport run_gradcheck_suite(std::size_t trials, std::uint64_t seed) {
    GradCheckReport report;
    Rng rng = make_rng(seed ^ 0x5eedULL);

    auto add_entry = [&](const std::string& name, const TrialGen& gen) {
        GradCheckEntry e;
        e.name = name;
        e.trials = trials;
        e.max_rel_error = run_trials(gen, trials, rng);
        report.entries.push_back(e);
    };

    add_entry("add", [](Rng& r) {
        Trial t;
        Tensor a = Tensor::randn({3, 4}, r, 1.0, true);
        Tensor b = Tensor::randn({3, 4}, r, 1.0, true);
        Tensor c = Tensor::randn({3, 4}, r);
        t.params = {a, b};
        t.f = [=]() { return project(add(a, b), c); };
        return t;
    });
    add_entry("mul", [](Rng& r) {
        Trial t;
        Tensor a = Tensor::randn({3, 4}, r, 1.0, true);
        Tensor b = Tensor::randn({3, 4}, r, 1.0, true);
        Tensor c = Tensor::randn({3, 4}, r);
        t.params = {a, b};
        t.f = [=]() { return project(mul(a, b), c); };
        return t;
    });
    add_entry("div", [](Rng& r) {
        Trial t;
        Tensor a = Tensor::randn({3, 4}, r, 1.0, true);
        Tensor b = Tensor::randn({3, 4}, r, 1.0, true);
        for (double& v : b.value()) v = (v >= 0 ? 1.0 : -1.0) * (std::abs(v) + 0.5);
        Tensor c = Tensor::randn({3, 4}, r);
        t.params = {a, b};
        t.f = [=]() { return project(div(a, b), c); };
        return t;
    });
    add_entry("matmul", [](Rng& r) {
        Trial t;
        Tensor a = Tensor::randn({3, 5}, r, 1.0, true);
        Tensor b = Tensor::randn({5, 4}, r, 1.0, true);
        Tensor c = Tensor::randn({3, 4}, r);
        t.params = {a, b};
        t.f = [=]() { return project(matmul(a, b), c); };
        return t;
    });
    add_entry("transpose2d", [](Rng& r) {
        Trial t;
        Tensor a = Tensor::randn({4, 6}, r, 1.0, true);
        Tensor c = Tensor::randn({6, 4}, r);
        t.params = {a};
        t.f = [=]() { return project(transpose2d(a), c); };
        return t;
    });
    add_entry("relu", [](Rng& r) {
        Trial t;
        Tensor a = Tensor::randn({4, 4}, r, 1.0, true);
        Tensor c = Tensor::randn({4, 4}, r);
        t.params = {a};
        t.f = [=]() { return project(relu(a), c); };
        return t;
    });
    add_entry("sigmoid", [](Rng& r) {
        Trial t;
        Tensor a = Tensor::randn({4, 4}, r, 2.0, true);
        Tensor c = Tensor::randn({4, 4}, r);
        t.params = {a};
        t.f = [=]() { return project(sigmoid(a), c); };
        return t;
    });
    add_entry("softmax", [](Rng& r) {
        Trial t;
        Tensor a = Tensor::randn({3, 6}, r, 2.0, true);
        Tensor c = Tensor::randn({3, 6}, r);
        t.params = {a};
        t.f = [=]() { return project(softmax_lastdim(a), c); };
        return t;
    });
    add_entry("layer_norm", [](Rng& r) {
        Trial t;
        Tensor x = Tensor::randn({5, 6}, r, 1.5, true);
        Tensor gain = Tensor::randn({6}, r, 1.0, true);
        Tensor bias = Tensor::randn({6}, r, 1.0, true);
        Tensor c = Tensor::randn({5, 6}, r);
        t.params = {x, gain, bias};
        t.f = [=]() { return project(layer_norm(x, gain, bias), c); };
        return t;
    });
    add_entry("conv2d_3x3", [](Rng& r) {
        Trial t;
        Tensor x = Tensor::randn({2, 5, 5}, r, 1.0, true);
        Tensor w = Tensor::randn({3, 2, 3, 3}, r, 0.5, true);
        Tensor b = Tensor::randn({3}, r, 0.5, true);
        Tensor c = Tensor::randn({3, 5, 5}, r);
        t.params = {x, w, b};
        t.f = [=]() { return project(conv2d(x, w, b), c); };
        return t;
    });
    add_entry("conv2d_1x1", [](Rng& r) {
        Trial t;
        Tensor x = Tensor::randn({3, 4, 4}, r, 1.0, true);
        Tensor w = Tensor::randn({2, 3, 1, 1}, r, 0.5, true);
        Tensor c = Tensor::randn({2, 4, 4}, r);
        t.params = {x, w};
        t.f = [=]() { return project(conv2d(x, w), c); };
        return t;
    });
    add_entry("upsample_bilinear_x2", [](Rng& r) {
        Trial t;
        Tensor x = Tensor::randn({2, 3, 4}, r, 1.0, true);
        Tensor c = Tensor::randn({2, 6, 8}, r);
        t.params = {x};
        t.f = [=]() { return project(upsample_bilinear_x2(x), c); };
        return t;
    });
    add_entry("bce_with_logits", [](Rng& r) {
        Trial t;
        Tensor z = Tensor::randn({3, 4}, r, 2.0, true);
        Tensor targets = Tensor::zeros({3, 4}, true);
        for (double& v : targets.value()) v = rand_uniform(r, 0.1, 0.9);
        t.params = {z, targets};
        t.f = [=]() { return bce_with_logits(z, targets); };
        return t;
    });
    add_entry("cross_entropy_rows", [](Rng& r) {
        Trial t;
        Tensor z = Tensor::randn({4, 3}, r, 1.5, true);
        std::vector<int> targets;
        for (int i = 0; i < 4; ++i) targets.push_back(int(rand_int(r, 0, 2)));
        t.params = {z};
        t.f = [=]() { return cross_entropy_rows(z, targets); };
        return t;
    });
    add_entry("sum_gather_slice", [](Rng& r) {
        Trial t;
        Tensor x = Tensor::randn({5, 6}, r, 1.0, true);
        t.params = {x};
        t.f = [=]() {
            Tensor g = gather_rows(x, {4, 0, 2});
            Tensor s = slice_cols(g, 1, 4);
            return add(sum_all(s), mean_all(sum_lastdim(x)));
        };
        return t;
    });

    // full bilayer-GCN head loss on a 4x4 ROI (Tables 1-3 composition)
    add_entry("bilayer_gcn_loss_4x4", [](Rng& r) {
        Trial t;
        HeadConfig cfg;
        cfg.channels = 6;
        cfg.att_dim = 3;
        cfg.roi = 4;
        cfg.variant = HeadVariant::GCN;
        auto occluder = std::make_shared<BranchParams>(init_branch(cfg, r, true));
        auto occludee = std::make_shared<BranchParams>(init_branch(cfg, r, false));
        Tensor x = Tensor::randn({6, 4, 4}, r, 1.0, true);
        OcclusionPair pair = random_pair(r, 8, 8);
        t.params = branch_params(*occluder, cfg.variant, true);
        auto more = branch_params(*occludee, cfg.variant, false);
        t.params.insert(t.params.end(), more.begin(), more.end());
        t.params.push_back(x);
        t.f = [=]() {
            HeadOutput out = forward_bilayer(x, *occluder, *occludee, HeadVariant::GCN);
            return head_losses(out, pair, LossWeights{}).total;
        };
        return t;
    });

    // 2-query transformer decode + set loss on an 8x8 image; the bipartite
    // match is fixed across perturbations, as the assignment itself is a
    // discrete selection
    add_entry("transformer_set_loss_2q_8x8", [](Rng& r) {
        Trial t;
        TransformerConfig cfg;
        cfg.queries = 2;
        cfg.dim = 6;
        cfg.layers = 1;
        cfg.ffn_dim = 12;
        cfg.classes = 2;
        auto qs = std::make_shared<QuerySet>(init_queries(cfg, r));
        auto dec = std::make_shared<DecoderParams>(init_decoder(cfg, r));
        auto stem = std::make_shared<StemParams>(init_stem(cfg.dim, r));
        Tensor image = Tensor::randn({3, 8, 8}, r, 0.5);
        Tensor box_w = Tensor::randn({cfg.dim, 4}, r, 0.4, true);
        Tensor box_b = Tensor::zeros({4}, true);
        auto gts = std::make_shared<std::vector<SetGt>>();
        for (int g = 0; g < 2; ++g) {
            SetGt gt;
            gt.class_id = int(rand_int(r, 0, 1));
            gt.occludee_mask = BinaryMask(8, 8);
            gt.occluder_mask = BinaryMask(8, 8);
            for (int i = 0; i < 64; ++i) {
                gt.occludee_mask.px[i] = rand_int(r, 0, 1);
                gt.occluder_mask.px[i] = rand_int(r, 0, 3) == 0;
            }
            gt.box = Box{double(rand_int(r, 0, 3)), double(rand_int(r, 0, 3)),
                         double(rand_int(r, 2, 4)), double(rand_int(r, 2, 4))};
            gts->push_back(std::move(gt));
        }
        t.params = decoder_param_list(*dec);
        auto sp = stem_param_list(*stem);
        t.params.insert(t.params.end(), sp.begin(), sp.end());
        t.params.push_back(qs->occludee_q);
        t.params.push_back(box_w);
        t.params.push_back(box_b);
        // fix the assignment from an initial forward
        PixelFeatures px0 = run_stem(image, *stem);
        DecodeOutput out0 = bilayer_decode(*qs, px0, *dec, true);
        auto match = std::make_shared<MatchResult>(
            hungarian_match(matching_cost(out0.occludee, *gts, 8, 8)));
        t.f = [=]() {
            PixelFeatures px = run_stem(image, *stem);
            DecodeOutput out = bilayer_decode(*qs, px, *dec, true);
            Tensor box_preds = sigmoid(linear(out.occludee.embed, box_w, box_b));
            return set_loss(out, *gts, *match, 8, 8, box_preds).total;
        };
        return t;
    });

    return report;
}

}  // namespace bilayer
