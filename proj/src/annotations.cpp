#include "bilayer/annotations.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "bilayer/png_io.hpp"

namespace bilayer {

using nlohmann::json;

const InstanceAnnotation& SceneAnnotation::find(int instance_id) const {
    for (const auto& inst : instances)
        if (inst.id == instance_id) return inst;
    throw LookupError("scene " + std::to_string(image_id) + ": no instance " +
                      std::to_string(instance_id));
}

std::vector<std::uint64_t> rle_encode(const BinaryMask& m) {
    std::vector<std::uint64_t> counts;
    std::uint8_t current = 0;  // runs start with zeros
    std::uint64_t run = 0;
    for (std::uint8_t p : m.px) {
        if (p == current) {
            ++run;
        } else {
            counts.push_back(run);
            current = p;
            run = 1;
        }
    }
    counts.push_back(run);
    return counts;
}

BinaryMask rle_decode(const std::vector<std::uint64_t>& counts, int h, int w) {
    BinaryMask m(h, w);
    std::size_t pos = 0;
    std::uint8_t current = 0;
    for (std::uint64_t c : counts) {
        if (pos + c > m.px.size()) throw DomainError("rle_decode: counts exceed grid size");
        std::fill(m.px.begin() + pos, m.px.begin() + pos + c, current);
        pos += c;
        current = 1 - current;
    }
    if (pos != m.px.size()) throw DomainError("rle_decode: counts do not cover the grid");
    return m;
}

// ---- JSON ------------------------------------------------------------------

std::string dataset_to_json(const Dataset& ds) {
    json images = json::array();
    json annotations = json::array();
    for (const auto& scene : ds.scenes) {
        images.push_back({{"id", scene.image_id},
                          {"width", scene.width},
                          {"height", scene.height},
                          {"file_name", scene.file_name}});
        for (const auto& inst : scene.instances) {
            json a = {{"id", inst.id},
                      {"image_id", scene.image_id},
                      {"category_id", inst.class_id},
                      {"bbox", {inst.bbox.x, inst.bbox.y, inst.bbox.w, inst.bbox.h}},
                      {"modal_rle", rle_encode(inst.modal_mask)}};
            if (inst.amodal_mask) a["amodal_rle"] = rle_encode(*inst.amodal_mask);
            if (inst.occlusion_rank) a["occlusion_rank"] = *inst.occlusion_rank;
            annotations.push_back(std::move(a));
        }
    }
    json root = {{"images", images}, {"annotations", annotations}};
    return root.dump(2) + "\n";
}

Dataset dataset_from_json(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw IoError(std::string("dataset parse failed: ") + e.what());
    }
    Dataset ds;
    for (const auto& im : root.at("images")) {
        SceneAnnotation scene;
        scene.image_id = im.at("id").get<int>();
        scene.width = im.at("width").get<int>();
        scene.height = im.at("height").get<int>();
        scene.file_name = im.value("file_name", std::string());
        ds.scenes.push_back(std::move(scene));
    }
    auto scene_of = [&](int image_id) -> SceneAnnotation& {
        for (auto& s : ds.scenes)
            if (s.image_id == image_id) return s;
        throw IoError("annotation references unknown image " + std::to_string(image_id));
    };
    for (const auto& a : root.at("annotations")) {
        SceneAnnotation& scene = scene_of(a.at("image_id").get<int>());
        InstanceAnnotation inst;
        inst.id = a.at("id").get<int>();
        inst.class_id = a.at("category_id").get<int>();
        const auto& bb = a.at("bbox");
        inst.bbox = Box{bb.at(0).get<double>(), bb.at(1).get<double>(), bb.at(2).get<double>(),
                        bb.at(3).get<double>()};
        inst.modal_mask =
            rle_decode(a.at("modal_rle").get<std::vector<std::uint64_t>>(), scene.height, scene.width);
        if (a.contains("amodal_rle"))
            inst.amodal_mask = rle_decode(a.at("amodal_rle").get<std::vector<std::uint64_t>>(),
                                          scene.height, scene.width);
        if (a.contains("occlusion_rank")) inst.occlusion_rank = a.at("occlusion_rank").get<int>();
        for (const auto& other : scene.instances)
            if (other.id == inst.id)
                throw DomainError("duplicate instance id " + std::to_string(inst.id) + " in image " +
                                  std::to_string(scene.image_id));
        scene.instances.push_back(std::move(inst));
    }
    return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
    write_file_atomic(path, dataset_to_json(ds));
}

Dataset load_dataset(const std::string& path) { return dataset_from_json(read_file(path)); }

// ---- derivation ----------------------------------------------------------------

namespace {

// Integer pixel window of a box (ceil-covered).
struct Window {
    int x0, y0, w, h;
};

Window box_window(const Box& b) {
    const int x0 = int(std::floor(b.x));
    const int y0 = int(std::floor(b.y));
    const int x1 = int(std::ceil(b.x + b.w));
    const int y1 = int(std::ceil(b.y + b.h));
    return {x0, y0, std::max(0, x1 - x0), std::max(0, y1 - y0)};
}

bool mask_touches_window(const BinaryMask& m, const Window& win) {
    for (int y = std::max(0, win.y0); y < std::min(m.h, win.y0 + win.h); ++y)
        for (int x = std::max(0, win.x0); x < std::min(m.w, win.x0 + win.w); ++x)
            if (m.at(y, x)) return true;
    return false;
}

}  // namespace

OcclusionPair derive_pair_modal(const SceneAnnotation& scene, int target_id) {
    const InstanceAnnotation& target = scene.find(target_id);
    OcclusionPair pair;
    pair.target_id = target_id;
    pair.image_id = scene.image_id;
    pair.roi_box = target.bbox;
    const Window win = box_window(pair.roi_box);
    if (win.w <= 0 || win.h <= 0) throw DomainError("derive_pair_modal: target box is empty");

    pair.occludee_mask = crop_mask(target.modal_mask, win.x0, win.y0, win.w, win.h);
    BinaryMask occluder(win.h, win.w);
    for (const auto& other : scene.instances) {
        if (other.id == target_id) continue;
        if (!mask_touches_window(other.modal_mask, win)) continue;
        occluder = mask_or(occluder, crop_mask(other.modal_mask, win.x0, win.y0, win.w, win.h));
    }
    pair.occluder_mask = std::move(occluder);
    pair.occludee_boundary = boundary_gt(pair.occludee_mask);
    pair.occluder_boundary = boundary_gt(pair.occluder_mask);
    return pair;
}

OcclusionPair derive_pair_amodal(const SceneAnnotation& scene, int target_id) {
    const InstanceAnnotation& target = scene.find(target_id);
    if (!target.amodal_mask || !target.occlusion_rank)
        throw ContractError("derive_pair_amodal: target lacks amodal mask or occlusion rank");
    for (const auto& inst : scene.instances)
        if (!inst.amodal_mask || !inst.occlusion_rank)
            throw ContractError("derive_pair_amodal: instance " + std::to_string(inst.id) +
                                " lacks amodal mask or occlusion rank");

    OcclusionPair pair;
    pair.target_id = target_id;
    pair.image_id = scene.image_id;
    pair.roi_box = tight_box(*target.amodal_mask);
    const Window win = box_window(pair.roi_box);
    if (win.w <= 0 || win.h <= 0) throw DomainError("derive_pair_amodal: target mask is empty");

    pair.occludee_mask = crop_mask(*target.amodal_mask, win.x0, win.y0, win.w, win.h);
    BinaryMask occluder(win.h, win.w);
    for (const auto& other : scene.instances) {
        if (other.id == target_id) continue;
        if (*other.occlusion_rank >= *target.occlusion_rank) continue;
        if (mask_intersection_area(*other.amodal_mask, *target.amodal_mask) == 0) continue;
        occluder = mask_or(occluder, crop_mask(*other.amodal_mask, win.x0, win.y0, win.w, win.h));
    }
    pair.occluder_mask = std::move(occluder);
    pair.occludee_boundary = boundary_gt(pair.occludee_mask);
    pair.occluder_boundary = boundary_gt(pair.occluder_mask);
    return pair;
}

double box_overlap_ratio(const Box& a, const Box& b, OverlapKind kind) {
    if (a.area() <= 0 || b.area() <= 0) return 0.0;
    const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
    const double inter = ix * iy;
    if (inter <= 0) return 0.0;
    const double denom =
        kind == OverlapKind::IoU ? a.area() + b.area() - inter : std::min(a.area(), b.area());
    return inter / denom;
}

std::vector<int> extract_occ_split(const Dataset& ds, double threshold, OverlapKind kind) {
    std::vector<int> ids;
    for (const auto& scene : ds.scenes) {
        double best = 0;
        for (std::size_t i = 0; i < scene.instances.size(); ++i)
            for (std::size_t j = i + 1; j < scene.instances.size(); ++j)
                best = std::max(best, box_overlap_ratio(scene.instances[i].bbox,
                                                        scene.instances[j].bbox, kind));
        if (best >= threshold) ids.push_back(scene.image_id);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

std::vector<OcclusionPair> balance_sample(const std::vector<OcclusionPair>& pairs, Rng& rng,
                                          double target_fraction) {
    std::size_t occluded = 0;
    std::vector<std::size_t> plain_idx;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (pairs[i].occluded())
            ++occluded;
        else
            plain_idx.push_back(i);
    }
    // Largest count of non-occluded pairs that keeps the fraction >= target.
    std::size_t keep_plain = plain_idx.size();
    if (target_fraction > 0 && occluded + plain_idx.size() > 0) {
        const double cap = double(occluded) * (1.0 - target_fraction) / target_fraction;
        keep_plain = std::min<std::size_t>(keep_plain, std::size_t(std::floor(cap + 1e-9)));
    }
    // Pick survivors by partial Fisher-Yates over the non-occluded indices.
    std::vector<std::size_t> pool = plain_idx;
    std::vector<bool> dropped(pairs.size(), false);
    const std::size_t drops = plain_idx.size() - keep_plain;
    for (std::size_t d = 0; d < drops; ++d) {
        const std::size_t j = std::size_t(rand_int(rng, 0, std::int64_t(pool.size()) - 1));
        dropped[pool[j]] = true;
        pool[j] = pool.back();
        pool.pop_back();
    }
    std::vector<OcclusionPair> out;
    out.reserve(pairs.size() - drops);
    for (std::size_t i = 0; i < pairs.size(); ++i)
        if (!dropped[i]) out.push_back(pairs[i]);
    return out;
}

}  // namespace bilayer
