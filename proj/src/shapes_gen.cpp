#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "bilayer/png_io.hpp"
#include "bilayer/shapes_bench.hpp"

namespace bilayer {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct ShapeDraft {
    int cls = 0;  // 0 ellipse, 1 rectangle, 2 triangle
    double cx = 0, cy = 0;
    double a = 0, b = 0, rot = 0;
    std::array<double, 3> vx{}, vy{};  // triangle vertices
    std::array<std::uint8_t, 3> color{};
    int rank = 0;  // 0 = nearest to camera
};

BinaryMask raster(const ShapeDraft& s, int size) {
    BinaryMask m(size, size);
    const double cr = std::cos(s.rot), sr = std::sin(s.rot);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dx = x - s.cx, dy = y - s.cy;
            bool inside = false;
            if (s.cls == 0) {
                const double u = (dx * cr + dy * sr) / s.a;
                const double v = (-dx * sr + dy * cr) / s.b;
                inside = u * u + v * v <= 1.0;
            } else if (s.cls == 1) {
                const double u = dx * cr + dy * sr;
                const double v = -dx * sr + dy * cr;
                inside = std::abs(u) <= s.a && std::abs(v) <= s.b;
            } else {
                // consistent winding: all cross products share a sign
                double sign = 0;
                inside = true;
                for (int i = 0; i < 3; ++i) {
                    const int j = (i + 1) % 3;
                    const double c = (s.vx[j] - s.vx[i]) * (y - s.vy[i]) -
                                     (s.vy[j] - s.vy[i]) * (x - s.vx[i]);
                    if (c == 0) continue;
                    if (sign == 0)
                        sign = c > 0 ? 1 : -1;
                    else if ((c > 0 ? 1 : -1) != sign) {
                        inside = false;
                        break;
                    }
                }
            }
            if (inside) m.at(y, x) = 1;
        }
    return m;
}

ShapeDraft random_shape(Rng& rng, const GenConfig& cfg) {
    const double s = cfg.img_size;
    ShapeDraft d;
    d.cls = int(rand_int(rng, 0, cfg.classes - 1));
    d.cx = rand_uniform(rng, 0.18 * s, 0.82 * s);
    d.cy = rand_uniform(rng, 0.18 * s, 0.82 * s);
    d.rot = rand_uniform(rng, 0.0, kPi);
    if (d.cls == 2) {
        const double r0 = rand_uniform(rng, 0.18 * s, 0.30 * s);
        double ang = rand_uniform(rng, 0.0, 2.0 * kPi);
        for (int i = 0; i < 3; ++i) {
            const double r = r0 * rand_uniform(rng, 0.7, 1.15);
            d.vx[i] = d.cx + r * std::cos(ang);
            d.vy[i] = d.cy + r * std::sin(ang);
            ang += 2.0 * kPi / 3.0 * rand_uniform(rng, 0.7, 1.3);
        }
    } else {
        d.a = rand_uniform(rng, 0.14 * s, 0.26 * s);
        d.b = rand_uniform(rng, 0.14 * s, 0.26 * s);
    }
    for (auto& c : d.color) c = std::uint8_t(rand_int(rng, 90, 170));
    return d;
}

struct SceneDraft {
    std::vector<ShapeDraft> shapes;
    std::vector<BinaryMask> amodal, modal;
};

// Validates area, visibility and the required in-range overlapping pair;
// returns the (front, back) indices of a qualifying pair.
bool validate(const SceneDraft& d, const GenConfig& cfg, int* front, int* back) {
    const int n = int(d.shapes.size());
    const double min_area = std::max(40.0, cfg.img_size * cfg.img_size / 100.0);
    for (int i = 0; i < n; ++i) {
        const double area = double(d.amodal[i].area());
        if (area < min_area) return false;
        if (double(d.modal[i].area()) < cfg.min_visible_fraction * area) return false;
        const Box bb = tight_box(d.modal[i]);
        if (bb.w < 3 || bb.h < 3) return false;
    }
    *front = -1;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j || d.shapes[i].rank >= d.shapes[j].rank) continue;
            const double frac = double(mask_intersection_area(d.amodal[i], d.amodal[j])) /
                                double(d.amodal[j].area());
            if (frac >= cfg.min_overlap && frac <= cfg.max_overlap) {
                *front = i;
                *back = j;
                return true;
            }
        }
    return false;
}

ImageU8 render(const SceneDraft& d, int size, Rng& rng) {
    ImageU8 img(size, size);
    const int n = int(d.shapes.size());
    std::vector<int> by_rank(n);
    std::iota(by_rank.begin(), by_rank.end(), 0);
    std::sort(by_rank.begin(), by_rank.end(),
              [&](int a, int b) { return d.shapes[a].rank < d.shapes[b].rank; });
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            int owner = -1;
            for (int idx : by_rank)
                if (d.amodal[idx].at(y, x)) {
                    owner = idx;
                    break;
                }
            std::uint8_t* px = img.at(y, x);
            for (int c = 0; c < 3; ++c) {
                const double base = owner >= 0 ? d.shapes[owner].color[c] : 30.0;
                const double noise = rand_uniform(rng, owner >= 0 ? -10.0 : -8.0,
                                                  owner >= 0 ? 10.0 : 8.0);
                px[c] = std::uint8_t(std::clamp(base + noise, 0.0, 255.0));
            }
        }
    return img;
}

}  // namespace

std::vector<ShapeScene> gen_shapes(Rng& rng, std::size_t n_scenes, const GenConfig& cfg) {
    std::vector<ShapeScene> scenes;
    scenes.reserve(n_scenes);
    for (std::size_t s = 0; s < n_scenes; ++s) {
        SceneDraft draft;
        int front = -1, back = -1;
        bool ok = false;
        for (int attempt = 0; attempt < cfg.max_scene_retries && !ok; ++attempt) {
            draft = SceneDraft{};
            const int n = int(rand_int(rng, cfg.min_instances, cfg.max_instances));
            for (int i = 0; i < n; ++i) draft.shapes.push_back(random_shape(rng, cfg));
            // nudge the second shape near the first so an occluding pair is likely
            if (n >= 2) {
                const double s2 = cfg.img_size;
                const double ang = rand_uniform(rng, 0.0, 2.0 * kPi);
                const double dist = rand_uniform(rng, 0.18 * s2, 0.38 * s2);
                draft.shapes[1].cx =
                    std::clamp(draft.shapes[0].cx + dist * std::cos(ang), 0.12 * s2, 0.88 * s2);
                draft.shapes[1].cy =
                    std::clamp(draft.shapes[0].cy + dist * std::sin(ang), 0.12 * s2, 0.88 * s2);
                if (draft.shapes[1].cls == 2) {
                    const double dx = draft.shapes[1].cx - draft.shapes[0].cx;
                    const double dy = draft.shapes[1].cy - draft.shapes[0].cy;
                    for (int v = 0; v < 3; ++v) {
                        draft.shapes[1].vx[v] += dx;
                        draft.shapes[1].vy[v] += dy;
                    }
                }
            }
            std::vector<int> ranks(draft.shapes.size());
            std::iota(ranks.begin(), ranks.end(), 0);
            for (std::size_t i = ranks.size(); i > 1; --i)
                std::swap(ranks[i - 1], ranks[std::size_t(rand_int(rng, 0, std::int64_t(i) - 1))]);
            for (std::size_t i = 0; i < draft.shapes.size(); ++i) draft.shapes[i].rank = ranks[i];

            draft.amodal.clear();
            for (const auto& sh : draft.shapes) draft.amodal.push_back(raster(sh, cfg.img_size));
            draft.modal.resize(draft.shapes.size());
            for (std::size_t i = 0; i < draft.shapes.size(); ++i) {
                BinaryMask m = draft.amodal[i];
                for (std::size_t j = 0; j < draft.shapes.size(); ++j)
                    if (i != j && draft.shapes[j].rank < draft.shapes[i].rank)
                        m = mask_diff(m, draft.amodal[j]);
                draft.modal[i] = std::move(m);
            }
            ok = validate(draft, cfg, &front, &back);
        }
        if (!ok)
            throw GenerationError("gen_shapes: no valid scene after " +
                                  std::to_string(cfg.max_scene_retries) + " retries");

        // half the time the occluding pair shares a similar color, which makes
        // the boundary between them invisible from appearance alone
        if (rand_int(rng, 0, 1) == 0) {
            for (int c = 0; c < 3; ++c) {
                const double tinted = double(draft.shapes[front].color[c]) +
                                      rand_uniform(rng, -12.0, 12.0);
                draft.shapes[back].color[c] = std::uint8_t(std::clamp(tinted, 0.0, 255.0));
            }
        }

        ShapeScene scene;
        scene.image = render(draft, cfg.img_size, rng);
        scene.ann.image_id = int(s) + 1;
        scene.ann.width = cfg.img_size;
        scene.ann.height = cfg.img_size;
        for (std::size_t i = 0; i < draft.shapes.size(); ++i) {
            InstanceAnnotation inst;
            inst.id = scene.ann.image_id * 16 + int(i);
            inst.class_id = draft.shapes[i].cls;
            inst.modal_mask = draft.modal[i];
            inst.amodal_mask = draft.amodal[i];
            inst.occlusion_rank = draft.shapes[i].rank;
            inst.bbox = tight_box(inst.modal_mask);
            scene.ann.instances.push_back(std::move(inst));
        }
        scenes.push_back(std::move(scene));
    }
    return scenes;
}

Dataset scenes_to_dataset(const std::vector<ShapeScene>& scenes) {
    Dataset ds;
    ds.scenes.reserve(scenes.size());
    for (const auto& s : scenes) ds.scenes.push_back(s.ann);
    return ds;
}

void save_scenes(const std::vector<ShapeScene>& scenes, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "images");
    Dataset ds;
    char name[32];
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        std::snprintf(name, sizeof(name), "%06zu", i);
        const std::string rel = std::string("images/") + name + ".png";
        write_png_rgb((fs::path(out_dir) / rel).string(), scenes[i].image);
        SceneAnnotation ann = scenes[i].ann;
        ann.file_name = rel;
        ds.scenes.push_back(std::move(ann));
    }
    save_dataset(ds, (fs::path(out_dir) / "dataset.json").string());
}

std::vector<ShapeScene> load_scenes(const std::string& dir) {
    namespace fs = std::filesystem;
    Dataset ds = load_dataset((fs::path(dir) / "dataset.json").string());
    std::vector<ShapeScene> scenes;
    scenes.reserve(ds.scenes.size());
    for (auto& ann : ds.scenes) {
        ShapeScene s;
        if (ann.file_name.empty())
            throw IoError("scene " + std::to_string(ann.image_id) + " has no image file");
        s.image = read_png_rgb((fs::path(dir) / ann.file_name).string());
        s.ann = std::move(ann);
        scenes.push_back(std::move(s));
    }
    return scenes;
}

}  // namespace bilayer
