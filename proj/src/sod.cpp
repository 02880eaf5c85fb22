#include "bilayer/sod.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include <json.hpp>

#include "bilayer/png_io.hpp"

namespace bilayer {

using nlohmann::json;

std::vector<ObjectCut> build_cob(const Dataset& ds, const std::vector<ImageU8>& images,
                                 const SodConfig& cfg) {
    if (images.size() != ds.scenes.size())
        throw DimensionError("build_cob: image count does not match scene count");
    std::vector<ObjectCut> cob;
    for (std::size_t s = 0; s < ds.scenes.size(); ++s) {
        const SceneAnnotation& scene = ds.scenes[s];
        const ImageU8& img = images[s];
        for (const auto& inst : scene.instances) {
            if (inst.modal_mask.area() < cfg.min_area) continue;
            bool isolated = true;
            for (const auto& other : scene.instances) {
                if (other.id == inst.id) continue;
                if (box_overlap_ratio(inst.bbox, other.bbox) > cfg.max_box_overlap) {
                    isolated = false;
                    break;
                }
            }
            if (!isolated) continue;
            const int x0 = int(std::floor(inst.bbox.x));
            const int y0 = int(std::floor(inst.bbox.y));
            const int w = int(std::ceil(inst.bbox.x + inst.bbox.w)) - x0;
            const int h = int(std::ceil(inst.bbox.y + inst.bbox.h)) - y0;
            ObjectCut cut;
            cut.class_id = inst.class_id;
            cut.mask = crop_mask(inst.modal_mask, x0, y0, w, h);
            cut.contour = boundary_gt(cut.mask);
            cut.patch = ImageU8(h, w);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const int sy = y0 + y, sx = x0 + x;
                    if (sy < 0 || sy >= img.h || sx < 0 || sx >= img.w) continue;
                    const std::uint8_t* sp = img.at(sy, sx);
                    std::uint8_t* dp = cut.patch.at(y, x);
                    dp[0] = sp[0];
                    dp[1] = sp[1];
                    dp[2] = sp[2];
                }
            cut.source_image = scene.image_id;
            cut.source_instance = inst.id;
            cut.origin_x = x0;
            cut.origin_y = y0;
            cob.push_back(std::move(cut));
        }
    }
    return cob;
}

std::pair<const ObjectCut*, const ObjectCut*> sample_pair(const std::vector<ObjectCut>& cob,
                                                          Rng& rng) {
    if (cob.empty()) throw ContractError("sample_pair: object bank is empty");
    std::set<int> class_set;
    for (const auto& cut : cob) class_set.insert(cut.class_id);
    std::vector<int> classes(class_set.begin(), class_set.end());
    auto draw = [&]() -> const ObjectCut* {
        const int cls = classes[std::size_t(rand_int(rng, 0, std::int64_t(classes.size()) - 1))];
        std::vector<const ObjectCut*> members;
        for (const auto& cut : cob)
            if (cut.class_id == cls) members.push_back(&cut);
        return members[std::size_t(rand_int(rng, 0, std::int64_t(members.size()) - 1))];
    };
    const ObjectCut* occluder = draw();
    const ObjectCut* occludee = draw();
    return {occluder, occludee};
}

double overlap_rate(const BinaryMask& occluder_at_pos, const BinaryMask& occludee_mask) {
    const std::size_t occludee_area = occludee_mask.area();
    if (occludee_area == 0) throw DomainError("overlap_rate: occludee mask is empty");
    return double(mask_intersection_area(occluder_at_pos, occludee_mask)) / double(occludee_area);
}

namespace {

// Intersection of the cut's mask (offset to x,y) with the scene mask,
// without materializing a full-size grid.
std::size_t placed_intersection(const ObjectCut& cut, int x, int y,
                                const BinaryMask& scene_mask) {
    std::size_t inter = 0;
    for (int my = 0; my < cut.mask.h; ++my) {
        const int sy = y + my;
        if (sy < 0 || sy >= scene_mask.h) continue;
        for (int mx = 0; mx < cut.mask.w; ++mx) {
            if (!cut.mask.at(my, mx)) continue;
            const int sx = x + mx;
            if (sx < 0 || sx >= scene_mask.w) continue;
            inter += scene_mask.at(sy, sx);
        }
    }
    return inter;
}

}  // namespace

Placement grid_search_place(const ObjectCut& occluder, const BinaryMask& occludee_scene_mask,
                            int image_h, int image_w, const SodConfig& cfg, Rng& rng) {
    if (occluder.mask.h > image_h || occluder.mask.w > image_w)
        throw FeasibilityError("grid_search_place: occluder larger than the image");
    const std::size_t occludee_area = occludee_scene_mask.area();
    if (occludee_area == 0) throw DomainError("grid_search_place: occludee mask is empty");
    std::vector<Placement> feasible;
    for (int y = 0; y + occluder.mask.h <= image_h; y += cfg.stride) {
        for (int x = 0; x + occluder.mask.w <= image_w; x += cfg.stride) {
            const std::size_t inter = placed_intersection(occluder, x, y, occludee_scene_mask);
            const double rate = double(inter) / double(occludee_area);
            if (rate >= cfg.min_overlap && rate <= cfg.max_overlap)
                feasible.push_back({x, y, rate});
        }
    }
    if (feasible.empty())
        throw FeasibilityError("grid_search_place: no position reaches the overlap range");
    return feasible[std::size_t(rand_int(rng, 0, std::int64_t(feasible.size()) - 1))];
}

SyntheticSample compose(const ImageU8& scene, const BinaryMask& occludee_scene_mask,
                        int occludee_class, const ObjectCut& occluder, const Placement& placement) {
    SyntheticSample out;
    out.image = scene;
    out.placement_x = placement.x;
    out.placement_y = placement.y;

    BinaryMask occluder_full(scene.h, scene.w);
    for (int my = 0; my < occluder.mask.h; ++my) {
        const int sy = placement.y + my;
        if (sy < 0 || sy >= scene.h) continue;
        for (int mx = 0; mx < occluder.mask.w; ++mx) {
            if (!occluder.mask.at(my, mx)) continue;
            const int sx = placement.x + mx;
            if (sx < 0 || sx >= scene.w) continue;
            occluder_full.at(sy, sx) = 1;
            const std::uint8_t* sp = occluder.patch.at(my, mx);
            std::uint8_t* dp = out.image.at(sy, sx);
            dp[0] = sp[0];
            dp[1] = sp[1];
            dp[2] = sp[2];
        }
    }

    out.occluder.id = 1;
    out.occluder.class_id = occluder.class_id;
    out.occluder.amodal_mask = occluder_full;
    out.occluder.modal_mask = occluder_full;  // topmost, fully visible
    out.occluder.bbox = tight_box(occluder_full);
    out.occluder.occlusion_rank = 0;

    out.occludee.id = 2;
    out.occludee.class_id = occludee_class;
    out.occludee.amodal_mask = occludee_scene_mask;
    out.occludee.modal_mask = mask_diff(occludee_scene_mask, occluder_full);
    out.occludee.bbox = tight_box(out.occludee.modal_mask);
    out.occludee.occlusion_rank = 1;

    out.occluder_contour = boundary_gt(occluder_full);
    out.occludee_contour = boundary_gt(occludee_scene_mask);
    out.overlap_rate = overlap_rate(occluder_full, occludee_scene_mask);
    return out;
}

SyntheticSample synthesize_one(const std::vector<ObjectCut>& cob,
                               const std::vector<ImageU8>& images, const Dataset& ds,
                               const SodConfig& cfg, Rng& rng) {
    for (int attempt = 0; attempt < cfg.max_pair_retries; ++attempt) {
        auto [occluder, occludee] = sample_pair(cob, rng);
        std::size_t scene_idx = 0;
        while (scene_idx < ds.scenes.size() &&
               ds.scenes[scene_idx].image_id != occludee->source_image)
            ++scene_idx;
        if (scene_idx == ds.scenes.size())
            throw LookupError("synthesize_one: occludee source scene missing");
        const SceneAnnotation& scene = ds.scenes[scene_idx];
        const InstanceAnnotation& inst = scene.find(occludee->source_instance);
        try {
            Placement placement = grid_search_place(*occluder, inst.modal_mask, scene.height,
                                                    scene.width, cfg, rng);
            SyntheticSample s = compose(images[scene_idx], inst.modal_mask, occludee->class_id,
                                        *occluder, placement);
            s.occluder_source = occluder->source_instance;
            s.occludee_source = occludee->source_instance;
            return s;
        } catch (const FeasibilityError&) {
            // resample the pair
        }
    }
    throw GenerationError("synthesize_one: no feasible pair after " +
                          std::to_string(cfg.max_pair_retries) + " attempts");
}

void generate_sod(const Dataset& ds, const std::vector<ImageU8>& images, std::size_t count,
                  std::uint64_t seed, const std::string& out_dir, const SodConfig& cfg) {
    namespace fs = std::filesystem;
    const std::vector<ObjectCut> cob = build_cob(ds, images, cfg);
    if (cob.empty()) throw GenerationError("generate_sod: object bank is empty");
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "masks");

    json samples = json::array();
    char name[32];
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = derive_rng(seed, i);
        SyntheticSample s = synthesize_one(cob, images, ds, cfg, rng);
        std::snprintf(name, sizeof(name), "%06zu", i);
        const std::string stem(name);
        write_png_rgb((fs::path(out_dir) / "images" / (stem + ".png")).string(), s.image);
        write_png_mask((fs::path(out_dir) / "masks" / (stem + "_occluder_modal.png")).string(),
                       s.occluder.modal_mask);
        write_png_mask((fs::path(out_dir) / "masks" / (stem + "_occluder_amodal.png")).string(),
                       *s.occluder.amodal_mask);
        write_png_mask((fs::path(out_dir) / "masks" / (stem + "_occludee_modal.png")).string(),
                       s.occludee.modal_mask);
        write_png_mask((fs::path(out_dir) / "masks" / (stem + "_occludee_amodal.png")).string(),
                       *s.occludee.amodal_mask);
        samples.push_back({{"index", i},
                           {"image", "images/" + stem + ".png"},
                           {"occluder_class", s.occluder.class_id},
                           {"occludee_class", s.occludee.class_id},
                           {"occluder_source", s.occluder_source},
                           {"occludee_source", s.occludee_source},
                           {"placement", {s.placement_x, s.placement_y}},
                           {"overlap_rate", s.overlap_rate}});
    }
    json manifest = {{"seed", seed},
                     {"count", count},
                     {"overlap_range", {cfg.min_overlap, cfg.max_overlap}},
                     {"stride", cfg.stride},
                     {"samples", samples}};
    write_file_atomic((fs::path(out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

std::vector<ImageU8> load_scene_images(const Dataset& ds, const std::string& base_dir) {
    namespace fs = std::filesystem;
    std::vector<ImageU8> out;
    out.reserve(ds.scenes.size());
    for (const auto& scene : ds.scenes) {
        if (scene.file_name.empty())
            throw IoError("scene " + std::to_string(scene.image_id) + " has no file name");
        out.push_back(read_png_rgb((fs::path(base_dir) / scene.file_name).string()));
    }
    return out;
}

}  // namespace bilayer
