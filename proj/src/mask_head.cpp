#include "bilayer/mask_head.hpp"

#include <cmath>

namespace bilayer {

namespace {

// He-style fan-in scaling keeps pre-activation variance near one.
Tensor conv_init(std::size_t co, std::size_t ci, std::size_t k, Rng& rng) {
    const double stddev = std::sqrt(2.0 / double(ci * k * k));
    return Tensor::randn({co, ci, k, k}, rng, stddev, true);
}

Tensor mat_init(std::size_t rows, std::size_t cols, Rng& rng) {
    const double stddev = std::sqrt(1.0 / double(rows));
    return Tensor::randn({rows, cols}, rng, stddev, true);
}

}  // namespace

NonLocalParams init_nonlocal(std::size_t k, std::size_t att_dim, Rng& rng) {
    NonLocalParams p;
    p.theta_w = mat_init(k, att_dim, rng);
    p.theta_b = Tensor::zeros({att_dim}, true);
    p.phi_w = mat_init(k, att_dim, rng);
    p.phi_b = Tensor::zeros({att_dim}, true);
    p.wg = mat_init(k, k, rng);
    p.ln_gain = Tensor::full({k}, 1.0, true);
    p.ln_bias = Tensor::zeros({k}, true);
    return p;
}

BranchParams init_branch(const HeadConfig& cfg, Rng& rng, bool with_fuse) {
    const std::size_t k = cfg.channels;
    BranchParams p;
    p.pre_w = conv_init(k, k, 3, rng);
    p.pre_b = Tensor::zeros({k}, true);
    if (cfg.variant == HeadVariant::GCN) {
        p.nonlocal = init_nonlocal(k, cfg.att_dim, rng);
    } else {
        p.mid_w = conv_init(k, k, 3, rng);
        p.mid_b = Tensor::zeros({k}, true);
    }
    p.fcn_w = conv_init(k, k, 3, rng);
    p.fcn_b = Tensor::zeros({k}, true);
    if (with_fuse) p.fuse_w = mat_init(k, k, rng);
    p.boundary_w = conv_init(1, k, 1, rng);
    for (double& v : p.boundary_w.value()) v *= cfg.predictor_weight_scale;
    p.boundary_b = Tensor::full({1}, cfg.predictor_bias_init, true);
    p.mask_w = conv_init(1, k, 1, rng);
    for (double& v : p.mask_w.value()) v *= cfg.predictor_weight_scale;
    p.mask_b = Tensor::full({1}, cfg.predictor_bias_init, true);
    return p;
}

std::vector<Tensor> branch_params(BranchParams& p, HeadVariant variant, bool with_fuse) {
    std::vector<Tensor> out = {p.pre_w, p.pre_b};
    if (variant == HeadVariant::GCN) {
        out.insert(out.end(), {p.nonlocal.theta_w, p.nonlocal.theta_b, p.nonlocal.phi_w,
                               p.nonlocal.phi_b, p.nonlocal.wg, p.nonlocal.ln_gain,
                               p.nonlocal.ln_bias});
    } else {
        out.insert(out.end(), {p.mid_w, p.mid_b});
    }
    out.insert(out.end(), {p.fcn_w, p.fcn_b});
    if (with_fuse) out.push_back(p.fuse_w);
    out.insert(out.end(), {p.boundary_w, p.boundary_b, p.mask_w, p.mask_b});
    return out;
}

void register_branch(Checkpoint& ck, const std::string& prefix, const BranchParams& p,
                     HeadVariant variant, bool with_fuse) {
    ck.add(prefix + ".pre.w", p.pre_w);
    ck.add(prefix + ".pre.b", p.pre_b);
    if (variant == HeadVariant::GCN) {
        ck.add(prefix + ".nl.theta.w", p.nonlocal.theta_w);
        ck.add(prefix + ".nl.theta.b", p.nonlocal.theta_b);
        ck.add(prefix + ".nl.phi.w", p.nonlocal.phi_w);
        ck.add(prefix + ".nl.phi.b", p.nonlocal.phi_b);
        ck.add(prefix + ".nl.wg", p.nonlocal.wg);
        ck.add(prefix + ".nl.ln.gain", p.nonlocal.ln_gain);
        ck.add(prefix + ".nl.ln.bias", p.nonlocal.ln_bias);
    } else {
        ck.add(prefix + ".mid.w", p.mid_w);
        ck.add(prefix + ".mid.b", p.mid_b);
    }
    ck.add(prefix + ".fcn.w", p.fcn_w);
    ck.add(prefix + ".fcn.b", p.fcn_b);
    if (with_fuse) ck.add(prefix + ".fuse.w", p.fuse_w);
    ck.add(prefix + ".boundary.w", p.boundary_w);
    ck.add(prefix + ".boundary.b", p.boundary_b);
    ck.add(prefix + ".mask.w", p.mask_w);
    ck.add(prefix + ".mask.b", p.mask_b);
}

BranchParams load_branch(const Checkpoint& ck, const std::string& prefix, HeadVariant variant,
                         bool with_fuse) {
    BranchParams p;
    p.pre_w = ck.get(prefix + ".pre.w");
    p.pre_b = ck.get(prefix + ".pre.b");
    if (variant == HeadVariant::GCN) {
        p.nonlocal.theta_w = ck.get(prefix + ".nl.theta.w");
        p.nonlocal.theta_b = ck.get(prefix + ".nl.theta.b");
        p.nonlocal.phi_w = ck.get(prefix + ".nl.phi.w");
        p.nonlocal.phi_b = ck.get(prefix + ".nl.phi.b");
        p.nonlocal.wg = ck.get(prefix + ".nl.wg");
        p.nonlocal.ln_gain = ck.get(prefix + ".nl.ln.gain");
        p.nonlocal.ln_bias = ck.get(prefix + ".nl.ln.bias");
    } else {
        p.mid_w = ck.get(prefix + ".mid.w");
        p.mid_b = ck.get(prefix + ".mid.b");
    }
    p.fcn_w = ck.get(prefix + ".fcn.w");
    p.fcn_b = ck.get(prefix + ".fcn.b");
    if (with_fuse) p.fuse_w = ck.get(prefix + ".fuse.w");
    p.boundary_w = ck.get(prefix + ".boundary.w");
    p.boundary_b = ck.get(prefix + ".boundary.b");
    p.mask_w = ck.get(prefix + ".mask.w");
    p.mask_b = ck.get(prefix + ".mask.b");
    return p;
}

Tensor adjacency(const Tensor& x, const NonLocalParams& p) {
    Tensor q = linear(x, p.theta_w, p.theta_b);
    Tensor k = linear(x, p.phi_w, p.phi_b);
    Tensor logits = matmul(q, transpose2d(k));
    return softmax_lastdim(logits);
}

Tensor gcn_layer(const Tensor& x, const NonLocalParams& p) {
    Tensor a = adjacency(x, p);
    Tensor h = matmul(a, matmul(x, p.wg));
    Tensor z = relu(layer_norm(h, p.ln_gain, p.ln_bias));
    return add(z, x);
}

BranchOutput run_branch(const Tensor& x_roi, const BranchParams& p, HeadVariant variant) {
    const std::size_t h = x_roi.dim(1), w = x_roi.dim(2);
    Tensor f = relu(conv2d(x_roi, p.pre_w, p.pre_b));
    BranchOutput out;
    if (variant == HeadVariant::GCN) {
        out.z = gcn_layer(chw_to_nk(f), p.nonlocal);
    } else {
        out.z = chw_to_nk(relu(conv2d(f, p.mid_w, p.mid_b)));
    }
    Tensor spatial = nk_to_chw(out.z, h, w);
    Tensor g = relu(conv2d(spatial, p.fcn_w, p.fcn_b));
    Tensor up = upsample_bilinear_x2(g);
    out.boundary_logits = conv2d(up, p.boundary_w, p.boundary_b);
    out.mask_logits = conv2d(up, p.mask_w, p.mask_b);
    return out;
}

Tensor fuse(const Tensor& z0, const Tensor& fuse_w, const Tensor& x_roi_nodes) {
    return add(matmul(z0, fuse_w), x_roi_nodes);
}

HeadOutput forward_bilayer(const Tensor& x_roi, const BranchParams& occluder_p,
                           const BranchParams& occludee_p, HeadVariant variant) {
    const std::size_t h = x_roi.dim(1), w = x_roi.dim(2);
    BranchOutput occluder = run_branch(x_roi, occluder_p, variant);
    HeadOutput out;
    out.z0 = occluder.z;
    out.occluder_boundary_logits = occluder.boundary_logits;
    out.occluder_mask_logits = occluder.mask_logits;
    out.xf = fuse(out.z0, occluder_p.fuse_w, chw_to_nk(x_roi));
    BranchOutput occludee = run_branch(nk_to_chw(out.xf, h, w), occludee_p, variant);
    out.z1 = occludee.z;
    out.occludee_boundary_logits = occludee.boundary_logits;
    out.occludee_mask_logits = occludee.mask_logits;
    return out;
}

BranchOutput forward_single(const Tensor& x_roi, const BranchParams& p, HeadVariant variant) {
    return run_branch(x_roi, p, variant);
}

Tensor mask_target(const BinaryMask& m, std::size_t h, std::size_t w) {
    BinaryMask r = (std::size_t(m.h) == h && std::size_t(m.w) == w)
                       ? m
                       : resize_mask_area(m, int(h), int(w));
    std::vector<double> data(r.px.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = r.px[i];
    return Tensor::from_data({1, h, w}, std::move(data));
}

namespace {

struct PairTargets {
    Tensor occludee_mask, occludee_boundary, occluder_mask, occluder_boundary;
};

PairTargets pair_targets(const OcclusionPair& gt, std::size_t h, std::size_t w) {
    BinaryMask occludee = resize_mask_area(gt.occludee_mask, int(h), int(w));
    BinaryMask occluder = resize_mask_area(gt.occluder_mask, int(h), int(w));
    PairTargets t;
    t.occludee_mask = mask_target(occludee, h, w);
    t.occluder_mask = mask_target(occluder, h, w);
    t.occludee_boundary = mask_target(boundary_gt(occludee), h, w);
    t.occluder_boundary = mask_target(boundary_gt(occluder), h, w);
    return t;
}

void check_logits_shape(const HeadOutput& out) {
    const auto& s = out.occluder_boundary_logits.shape();
    if (out.occluder_mask_logits.shape() != s || out.occludee_boundary_logits.shape() != s ||
        out.occludee_mask_logits.shape() != s)
        throw DimensionError("head_losses: logit maps disagree in shape");
}

}  // namespace

HeadLosses head_losses(const HeadOutput& out, const OcclusionPair& gt, const LossWeights& w) {
    check_logits_shape(out);
    const std::size_t h = out.occludee_mask_logits.dim(1);
    const std::size_t wd = out.occludee_mask_logits.dim(2);
    PairTargets t = pair_targets(gt, h, wd);
    HeadLosses l;
    l.occluder_boundary = bce_with_logits(out.occluder_boundary_logits, t.occluder_boundary);
    l.occluder_mask = bce_with_logits(out.occluder_mask_logits, t.occluder_mask);
    l.occludee_boundary = bce_with_logits(out.occludee_boundary_logits, t.occludee_boundary);
    l.occludee_mask = bce_with_logits(out.occludee_mask_logits, t.occludee_mask);
    l.total = add(add(scale(l.occluder_boundary, w.occluder_boundary),
                      scale(l.occluder_mask, w.occluder_mask)),
                  add(scale(l.occludee_boundary, w.occludee_boundary),
                      scale(l.occludee_mask, w.occludee_mask)));
    return l;
}

HeadLosses single_losses(const BranchOutput& out, const OcclusionPair& gt, const LossWeights& w) {
    if (out.boundary_logits.shape() != out.mask_logits.shape())
        throw DimensionError("single_losses: logit maps disagree in shape");
    const std::size_t h = out.mask_logits.dim(1);
    const std::size_t wd = out.mask_logits.dim(2);
    PairTargets t = pair_targets(gt, h, wd);
    HeadLosses l;
    l.occludee_boundary = bce_with_logits(out.boundary_logits, t.occludee_boundary);
    l.occludee_mask = bce_with_logits(out.mask_logits, t.occludee_mask);
    l.total = add(scale(l.occludee_boundary, w.occludee_boundary),
                  scale(l.occludee_mask, w.occludee_mask));
    return l;
}

}  // namespace bilayer
