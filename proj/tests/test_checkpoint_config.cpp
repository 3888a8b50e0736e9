#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "boxmask/checkpoint.hpp"
#include "boxmask/config.hpp"
#include "boxmask/detector.hpp"
#include "boxmask/error.hpp"

using namespace boxmask;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("boxmask_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

} // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("parameters and metadata round-trip bit-exactly") {
    const fs::path dir = fresh_dir("ckpt");
    DetectorConfig cfg;
    cfg.seed = 12;
    Detector a(cfg);
    a.parameters().at("head.cls.b").value[1] = 1.0 / 3.0;
    save_checkpoint(dir / "m.ckpt", a.parameters(), {{"note", "hello world"}, {"config.seed", "12"}});
    CHECK(fs::exists(manifest_path(dir / "m.ckpt")));
    const Checkpoint ck = read_checkpoint(dir / "m.ckpt");
    CHECK(ck.meta.at("note") == "hello world");
    CHECK(ck.entries.size() == a.parameters().all().size());
    DetectorConfig other = cfg;
    other.seed = 99;
    Detector b(other);
    load_parameters(ck, b.parameters());
    for (const Parameter* p : a.parameters().all()) {
        const Parameter& q = b.parameters().at(p->name);
        CHECK_MESSAGE(std::equal(p->value.values().begin(), p->value.values().end(), q.value.values().begin()),
                      p->name);
    }
    fs::remove_all(dir);
}

TEST_CASE("mismatched architectures name the parameter") {
    const fs::path dir = fresh_dir("ckpt_mismatch");
    DetectorConfig one;
    Detector a(one);
    save_checkpoint(dir / "a.ckpt", a.parameters());
    const Checkpoint ck = read_checkpoint(dir / "a.ckpt");

    DetectorConfig two;
    two.n_conv = 2;
    Detector b(two);
    CHECK_THROWS_WITH_AS(load_parameters(ck, b.parameters()), doctest::Contains("boxmask.conv2"), ShapeMismatch);

    DetectorConfig wide;
    wide.num_classes = 4;
    Detector c(wide);
    CHECK_THROWS_WITH_AS(load_parameters(ck, c.parameters()), doctest::Contains("head.cls"), ShapeMismatch);

    DetectorConfig off;
    off.boxmask_enabled = false;
    Detector d(off);
    CHECK_THROWS_WITH_AS(load_parameters(ck, d.parameters()), doctest::Contains("boxmask."), ShapeMismatch);
    fs::remove_all(dir);
}

TEST_CASE("truncated data files are rejected") {
    const fs::path dir = fresh_dir("ckpt_trunc");
    Detector a(DetectorConfig{});
    save_checkpoint(dir / "a.ckpt", a.parameters());
    fs::resize_file(dir / "a.ckpt", fs::file_size(dir / "a.ckpt") / 2);
    CHECK_THROWS_AS(read_checkpoint(dir / "a.ckpt"), FormatError);
    CHECK_THROWS_AS(read_checkpoint(dir / "missing.ckpt"), Error);
    fs::remove_all(dir);
}

}

TEST_SUITE("config") {

TEST_CASE("text form round-trips every key") {
    RunConfig c;
    c.seed = 77;
    c.detector.lambda_bm = 0.1;
    c.detector.n_conv = 3;
    c.sampling.mode = SamplingMode::strided;
    c.eval_thresholds = {0.5, 0.75};
    c.scene.noise = 0.0123456789012345;
    c.ablate_seeds = {1, 2, 3};
    RunConfig back;
    apply_config_text(back, config_to_text(c));
    CHECK(config_to_text(back) == config_to_text(c));
    for (const std::string& key : config_keys()) {
        CHECK_MESSAGE(get_config_value(back, key) == get_config_value(c, key), key);
    }
    CHECK(back.scene.noise == c.scene.noise);
}

TEST_CASE("unknown keys and bad values are rejected with their line") {
    RunConfig c;
    CHECK_THROWS_WITH_AS(apply_config_text(c, "seed = 1\n# fine\nmodel.depth = 3\n", "x.cfg"),
                         doctest::Contains("x.cfg:3"), InvalidArgument);
    CHECK_THROWS_AS(set_config_value(c, "detector.n_conv", "two"), InvalidArgument);
    CHECK_THROWS_AS(set_config_value(c, "detector.boxmask", "maybe"), InvalidArgument);
    CHECK_THROWS_AS(apply_config_text(c, "no equals sign\n"), InvalidArgument);
}

TEST_CASE("comments and blank lines are ignored") {
    RunConfig c;
    apply_config_text(c, "\n# comment\n  detector.lambda = 0.25   # trailing\n\ndetector.boxmask = off\n");
    CHECK(c.detector.lambda_bm == 0.25);
    CHECK_FALSE(c.detector.boxmask_enabled);
}

TEST_CASE("resolved detector carries seed and class count") {
    RunConfig c;
    c.seed = 5;
    set_config_value(c, "data.classes", "2");
    const DetectorConfig d = c.resolved_detector();
    CHECK(d.seed == 5u);
    CHECK(d.num_classes == 2);
    CHECK(c.resolved_scene().classes.size() == 2u);
}

}
