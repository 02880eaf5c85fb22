#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "bilayer/png_io.hpp"
#include "bilayer/shapes_bench.hpp"
#include "bilayer/sod.hpp"

using namespace bilayer;
namespace fs = std::filesystem;

namespace {

BinaryMask rect_mask(int h, int w, int y0, int x0, int rh, int rw) {
    BinaryMask m(h, w);
    for (int y = y0; y < y0 + rh; ++y)
        for (int x = x0; x < x0 + rw; ++x)
            if (y >= 0 && y < h && x >= 0 && x < w) m.at(y, x) = 1;
    return m;
}

InstanceAnnotation make_inst(int id, int cls, BinaryMask modal) {
    InstanceAnnotation inst;
    inst.id = id;
    inst.class_id = cls;
    inst.bbox = tight_box(modal);
    inst.modal_mask = std::move(modal);
    return inst;
}

// A dataset of single large isolated rectangles, one per scene.
std::pair<Dataset, std::vector<ImageU8>> bank_dataset(int scenes, int img, int side, Rng& rng) {
    Dataset ds;
    std::vector<ImageU8> images;
    for (int i = 0; i < scenes; ++i) {
        SceneAnnotation scene;
        scene.image_id = i + 1;
        scene.width = scene.height = img;
        const int y = int(rand_int(rng, 0, img - side));
        const int x = int(rand_int(rng, 0, img - side));
        scene.instances.push_back(make_inst(i * 10 + 1, int(rand_int(rng, 0, 2)),
                                            rect_mask(img, img, y, x, side, side)));
        ds.scenes.push_back(std::move(scene));
        ImageU8 image(img, img);
        for (auto& p : image.px) p = std::uint8_t(rand_int(rng, 0, 255));
        images.push_back(std::move(image));
    }
    return {ds, images};
}

}  // namespace

TEST_CASE("build_cob area and isolation filters match the exhaustive oracle") {
    Dataset ds;
    std::vector<ImageU8> images;
    SceneAnnotation scene;
    scene.image_id = 1;
    scene.width = scene.height = 100;
    // six crafted instances: vary area around 1024 and isolation around 5%
    scene.instances.push_back(make_inst(1, 0, rect_mask(100, 100, 0, 0, 31, 31)));    // 961 px
    scene.instances.push_back(make_inst(2, 0, rect_mask(100, 100, 0, 40, 32, 32)));   // 1024 px
    scene.instances.push_back(make_inst(3, 1, rect_mask(100, 100, 40, 0, 40, 40)));   // big
    scene.instances.push_back(make_inst(4, 1, rect_mask(100, 100, 42, 2, 40, 40)));   // overlaps 3
    scene.instances.push_back(make_inst(5, 2, rect_mask(100, 100, 40, 60, 36, 36)));  // isolated
    scene.instances.push_back(make_inst(6, 2, rect_mask(100, 100, 0, 75, 20, 20)));   // small
    ds.scenes.push_back(scene);
    ImageU8 img(100, 100);
    images.push_back(img);

    std::vector<ObjectCut> cob = build_cob(ds, images);
    // oracle: recompute the two filters exhaustively
    std::map<int, bool> expect;
    for (const auto& inst : scene.instances) {
        bool ok = inst.modal_mask.area() >= 1024;
        for (const auto& other : scene.instances) {
            if (other.id == inst.id) continue;
            if (box_overlap_ratio(inst.bbox, other.bbox) > 0.05) ok = false;
        }
        expect[inst.id] = ok;
    }
    CHECK_FALSE(expect[1]);  // area 961 < 1024
    CHECK(expect[2]);
    CHECK_FALSE(expect[3]);  // heavy mutual overlap
    CHECK_FALSE(expect[4]);
    CHECK(expect[5]);
    CHECK_FALSE(expect[6]);
    std::map<int, bool> got;
    for (const auto& cut : cob) got[cut.source_instance] = true;
    for (const auto& [id, keep] : expect) CHECK(got.count(id) == std::size_t(keep));

    // monotone: shrinking the area threshold never removes an instance
    SodConfig relaxed;
    relaxed.min_area = 100;
    std::vector<ObjectCut> more = build_cob(ds, images, relaxed);
    for (const auto& cut : cob) {
        bool found = false;
        for (const auto& c : more) found = found || c.source_instance == cut.source_instance;
        CHECK(found);
    }
}

TEST_CASE("build_cob cuts carry the patch, mask and contour") {
    Rng rng = make_rng(2);
    auto [ds, images] = bank_dataset(1, 80, 40, rng);
    std::vector<ObjectCut> cob = build_cob(ds, images);
    REQUIRE(cob.size() == 1);
    const ObjectCut& cut = cob[0];
    CHECK(cut.mask.area() == 1600);
    CHECK(cut.patch.h == cut.mask.h);
    CHECK(cut.patch.w == cut.mask.w);
    CHECK(cut.contour == boundary_gt(cut.mask));
    const InstanceAnnotation& inst = ds.scenes[0].instances[0];
    for (int y = 0; y < cut.patch.h; ++y)
        for (int x = 0; x < cut.patch.w; ++x)
            for (int c = 0; c < 3; ++c)
                CHECK(cut.patch.at(y, x)[c] ==
                      images[0].at(int(inst.bbox.y) + y, int(inst.bbox.x) + x)[c]);
}

TEST_CASE("sample_pair degenerate, uniform-class and deterministic") {
    Rng rng = make_rng(3);
    auto [ds, images] = bank_dataset(1, 80, 40, rng);
    std::vector<ObjectCut> cob = build_cob(ds, images);
    Rng r2 = make_rng(1);
    auto [a, b] = sample_pair(cob, r2);
    CHECK(a == &cob[0]);
    CHECK(b == &cob[0]);

    CHECK_THROWS_AS(sample_pair({}, r2), ContractError);

    // two classes with 1 and 99 instances: classes drawn about evenly
    std::vector<ObjectCut> skewed;
    for (int i = 0; i < 100; ++i) {
        ObjectCut cut;
        cut.class_id = i == 0 ? 0 : 1;
        cut.source_instance = i;
        skewed.push_back(std::move(cut));
    }
    Rng r3 = make_rng(7);
    int class0 = 0;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
        auto [occ, tgt] = sample_pair(skewed, r3);
        class0 += occ->class_id == 0;
        class0 += tgt->class_id == 0;
    }
    // chi-squared against a fair split over 2*trials draws; 1 dof, p>0.01 -> stat < 6.63
    const double n = 2.0 * trials;
    const double chi2 = (class0 - n / 2) * (class0 - n / 2) / (n / 4);
    CHECK(chi2 < 6.63);

    Rng r4 = make_rng(9), r5 = make_rng(9);
    auto p1 = sample_pair(skewed, r4);
    auto p2 = sample_pair(skewed, r5);
    CHECK(p1.first->source_instance == p2.first->source_instance);
    CHECK(p1.second->source_instance == p2.second->source_instance);
}

TEST_CASE("overlap_rate identities and pixel-count oracle") {
    BinaryMask occludee = rect_mask(10, 10, 2, 2, 4, 4);
    BinaryMask far = rect_mask(10, 10, 7, 7, 2, 2);
    CHECK(overlap_rate(far, occludee) == 0.0);
    BinaryMask cover = rect_mask(10, 10, 0, 0, 10, 10);
    CHECK(overlap_rate(cover, occludee) == doctest::Approx(1.0));
    BinaryMask part = rect_mask(10, 10, 2, 4, 4, 4);  // overlaps right half: 4x2 of 16
    CHECK(overlap_rate(part, occludee) == doctest::Approx(8.0 / 16.0));
    CHECK_THROWS_AS(overlap_rate(part, BinaryMask(10, 10)), DomainError);
}

TEST_CASE("grid_search_place feasibility errors and enumeration oracle") {
    Rng rng = make_rng(4);
    ObjectCut big;
    big.mask = rect_mask(12, 12, 0, 0, 12, 12);
    BinaryMask occludee = rect_mask(8, 8, 2, 2, 4, 4);
    SodConfig cfg;
    CHECK_THROWS_AS(grid_search_place(big, occludee, 8, 8, cfg, rng), FeasibilityError);

    // equal 4x4 squares on a 10x10 grid at stride 1: compare the feasible set
    ObjectCut sq;
    sq.mask = rect_mask(4, 4, 0, 0, 4, 4);
    BinaryMask target = rect_mask(10, 10, 3, 3, 4, 4);
    SodConfig fine;
    fine.stride = 1;
    std::map<std::pair<int, int>, double> feasible_oracle;
    for (int y = 0; y + 4 <= 10; ++y)
        for (int x = 0; x + 4 <= 10; ++x) {
            int inter = 0;
            for (int my = 0; my < 4; ++my)
                for (int mx = 0; mx < 4; ++mx) inter += target.at(y + my, x + mx);
            const double rate = inter / 16.0;
            if (rate >= 0.2 && rate <= 0.5) feasible_oracle[{x, y}] = rate;
        }
    REQUIRE(!feasible_oracle.empty());
    // every returned placement must be in the oracle set (and in range)
    for (int trial = 0; trial < 200; ++trial) {
        Placement p = grid_search_place(sq, target, 10, 10, fine, rng);
        auto it = feasible_oracle.find({p.x, p.y});
        REQUIRE(it != feasible_oracle.end());
        CHECK(p.rate == doctest::Approx(it->second));
        CHECK(p.rate >= 0.2);
        CHECK(p.rate <= 0.5);
    }
    // with enough draws every feasible position appears
    std::map<std::pair<int, int>, int> seen;
    Rng r2 = make_rng(5);
    for (int trial = 0; trial < 2000; ++trial) {
        Placement p = grid_search_place(sq, target, 10, 10, fine, r2);
        seen[{p.x, p.y}]++;
    }
    CHECK(seen.size() == feasible_oracle.size());
}

TEST_CASE("compose pastes the occluder and derives the ground truth") {
    ImageU8 scene(12, 12);
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) {
            scene.at(y, x)[0] = 10;
            scene.at(y, x)[1] = 20;
            scene.at(y, x)[2] = 30;
        }
    BinaryMask occludee = rect_mask(12, 12, 4, 4, 5, 5);
    ObjectCut occluder;
    occluder.class_id = 2;
    occluder.mask = rect_mask(3, 3, 0, 0, 3, 3);
    occluder.patch = ImageU8(3, 3);
    for (auto& p : occluder.patch.px) p = 200;

    Placement at{3, 3, 0.0};
    SyntheticSample s = compose(scene, occludee, 1, occluder, at);

    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) {
            const bool pasted = y >= 3 && y < 6 && x >= 3 && x < 6;
            CHECK(s.image.at(y, x)[0] == (pasted ? 200 : 10));
        }
    CHECK(*s.occluder.amodal_mask == rect_mask(12, 12, 3, 3, 3, 3));
    CHECK(s.occluder.modal_mask == *s.occluder.amodal_mask);
    CHECK(*s.occludee.amodal_mask == occludee);
    CHECK(s.occludee.modal_mask == mask_diff(occludee, *s.occluder.amodal_mask));
    CHECK(s.overlap_rate == doctest::Approx(4.0 / 25.0));

    // zero-overlap placement keeps the occludee fully visible
    SyntheticSample clear = compose(scene, occludee, 1, occluder, Placement{9, 9, 0.0});
    CHECK(clear.occludee.modal_mask == occludee);

    // full cover empties the modal mask
    ObjectCut blanket;
    blanket.class_id = 0;
    blanket.mask = rect_mask(12, 12, 0, 0, 12, 12);
    blanket.patch = ImageU8(12, 12);
    SyntheticSample covered = compose(scene, occludee, 1, blanket, Placement{0, 0, 0.0});
    CHECK(covered.occludee.modal_mask.empty_mask());
}

TEST_CASE("synthesized samples satisfy the overlap and modal-amodal contracts") {
    Rng rng = make_rng(6);
    auto [ds, images] = bank_dataset(30, 96, 36, rng);
    std::vector<ObjectCut> cob = build_cob(ds, images);
    REQUIRE(cob.size() == 30);
    SodConfig cfg;
    for (int i = 0; i < 200; ++i) {
        Rng sample_rng = derive_rng(99, std::uint64_t(i));
        SyntheticSample s = synthesize_one(cob, images, ds, cfg, sample_rng);
        const double rate = overlap_rate(*s.occluder.amodal_mask, *s.occludee.amodal_mask);
        CHECK(rate >= 0.2);
        CHECK(rate <= 0.5);
        CHECK(s.occludee.modal_mask ==
              mask_diff(*s.occludee.amodal_mask, *s.occluder.amodal_mask));

        // round-trip: the modal derivation rule reproduces the occluder inside
        // the occludee's ROI box
        SceneAnnotation ann;
        ann.image_id = 1;
        ann.width = s.image.w;
        ann.height = s.image.h;
        ann.instances = {s.occluder, s.occludee};
        OcclusionPair pair = derive_pair_modal(ann, s.occludee.id);
        const int x0 = int(pair.roi_box.x), y0 = int(pair.roi_box.y);
        for (int y = 0; y < pair.occluder_mask.h; ++y)
            for (int x = 0; x < pair.occluder_mask.w; ++x)
                CHECK(pair.occluder_mask.at(y, x) == s.occluder.modal_mask.at(y0 + y, x0 + x));
    }
}

TEST_CASE("generate_sod writes a reproducible tree") {
    Rng rng = make_rng(8);
    auto [ds, images] = bank_dataset(10, 96, 36, rng);
    const fs::path base = fs::temp_directory_path() / "bilayer_sod_test";
    fs::remove_all(base);
    generate_sod(ds, images, 5, 1234, (base / "a").string());
    generate_sod(ds, images, 5, 1234, (base / "b").string());
    CHECK(read_file((base / "a" / "manifest.json").string()) ==
          read_file((base / "b" / "manifest.json").string()));
    for (const char* rel : {"images/000000.png", "masks/000003_occludee_modal.png",
                            "masks/000004_occluder_amodal.png"})
        CHECK(read_file((base / "a" / rel).string()) == read_file((base / "b" / rel).string()));

    // a different seed changes the manifest
    generate_sod(ds, images, 5, 77, (base / "c").string());
    CHECK(read_file((base / "a" / "manifest.json").string()) !=
          read_file((base / "c" / "manifest.json").string()));
    fs::remove_all(base);
}

TEST_CASE("png round-trip, gray and rgb") {
    Rng rng = make_rng(9);
    ImageU8 img(13, 7);
    for (auto& p : img.px) p = std::uint8_t(rand_int(rng, 0, 255));
    const fs::path p = fs::temp_directory_path() / "bilayer_png_test.png";
    write_png_rgb(p.string(), img);
    ImageU8 back = read_png_rgb(p.string());
    CHECK(back == img);

    BinaryMask m(9, 11);
    for (auto& v : m.px) v = rand_int(rng, 0, 1);
    write_png_mask(p.string(), m);
    CHECK(read_png_mask(p.string()) == m);
    fs::remove(p);
}
