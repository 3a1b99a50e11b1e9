#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <unistd.h>

#include "sublim/experiment.hpp"

using namespace sublim;
using namespace sublim::experiment;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("sublim_exp_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Random images with labels cycling through all ten classes.
data::LabeledSet fake_set(data::Task task, data::Split split, std::size_t n, std::uint64_t seed) {
    data::LabeledSet s;
    s.task = task;
    s.split = split;
    s.dim = 784;
    std::mt19937_64 gen(seed);
    std::uniform_int_distribution<int> px(0, 255);
    for (std::size_t i = 0; i < n; ++i) {
        s.labels.push_back(static_cast<int>(i % 10));
        for (std::size_t k = 0; k < 784; ++k) s.inputs.push_back(px(gen) / 255.0);
    }
    return s;
}

// IDX tree in the standard layout under a temporary root.
struct FakeData {
    TempDir dir;
    FakeData() {
        std::uint64_t seed = 1;
        for (auto task : {data::Task::mnist, data::Task::fashion}) {
            const auto d = dir.path / data::to_string(task);
            fs::create_directories(d);
            data::write_idx(fake_set(task, data::Split::train, 120, seed++), d / "train-images-idx3-ubyte",
                            d / "train-labels-idx1-ubyte");
            data::write_idx(fake_set(task, data::Split::test, 60, seed++), d / "t10k-images-idx3-ubyte",
                            d / "t10k-labels-idx1-ubyte");
        }
    }
};

const char* kAux = R"(
name = "tiny_aux"
protocol = "aux"
n_train = 40
seeds = [1, 2]

[model]
arch = "mlp"
hidden = [3]

[teacher]
lr = 1e-2
epochs = 2
batch_size = 8

[student]
lr = 1e-2
epochs = 2
batch_size = 8

[noise]
kind = "uniform784"
batches = 2
batch_size = 16
resample = "per_epoch"

[diagnostics]
chi_aux = true
cg_max_iters = 50
)";

const char* kTask = R"(
name = "tiny_task"
protocol = "task"
n_train = 40
seeds = [3]

[model]
arch = "cnn"
filters = 1

[base]
lr = 1e-2
epochs = 2
batch_size = 8

[teacher]
lr = 1e-2
epochs = 2
batch_size = 8

[student]
lr = 1e-2
epochs = 1
batch_size = 8

[poison]
class_a = 1
class_b = 5

[diagnostics]
chi = true
sampled_chi = 4
control = true
cg_max_iters = 50
)";

std::string error_of(const std::string& text) {
    try {
        parse_config(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

std::string replace(std::string s, const std::string& from, const std::string& to) {
    const auto at = s.find(from);
    REQUIRE(at != std::string::npos);
    return s.replace(at, from.size(), to);
}

}  // namespace

TEST_CASE("config parsing and round trip") {
    const auto aux = parse_config(kAux);
    CHECK(aux.protocol == Protocol::aux);
    CHECK(aux.model.channel == Channel::aux);
    CHECK(aux.model.hidden == std::vector<std::size_t>{3});
    CHECK(aux.noise.resample == data::Resample::per_epoch);
    CHECK(aux.seeds == std::vector<std::uint64_t>{1, 2});
    CHECK(aux.profile == "desk");
    CHECK(parse_config(to_toml(aux)) == aux);

    const auto task = parse_config(kTask);
    CHECK(task.model.arch == Arch::cnn);
    CHECK(task.diagnostics.sampled_chi == 4);
    CHECK(parse_config(to_toml(task)) == task);
    CHECK(to_toml(parse_config(to_toml(task))) == to_toml(task));

    SUBCASE("shipped configs") {
        std::size_t n = 0;
        for (const auto& profile : {"desk", "paper"}) {
            for (const auto& e : fs::directory_iterator(fs::path(SUBLIM_CONFIG_DIR) / profile)) {
                const auto c = load_config(e.path());
                CHECK(c.profile == profile);
                CHECK(parse_config(to_toml(c)) == c);
                ++n;
            }
        }
        CHECK(n >= 8);
    }
}

TEST_CASE("config errors name the field") {
    CHECK(error_of(replace(kAux, "lr = 1e-2", "lrr = 1e-2")).find("teacher.lrr") != std::string::npos);
    CHECK(error_of(replace(kAux, "epochs = 2", "epochs = 1.5")).find("teacher.epochs") != std::string::npos);
    CHECK(error_of(replace(kAux, "kind = \"uniform784\"", "kind = \"gaussian_state1024\"")).find("noise.kind") !=
          std::string::npos);
    CHECK(error_of(std::string(kAux) + "\n[poison]\nclass_a = 1\n").find("poison") != std::string::npos);
    CHECK(error_of(replace(kTask, "control = true", "chi_aux = true")).find("chi_aux") != std::string::npos);
    CHECK(error_of(replace(kAux, "arch = \"mlp\"\nhidden = [3]", "arch = \"cnn\"")).find("model") !=
          std::string::npos);
    CHECK(error_of(replace(kAux, "seeds = [1, 2]", "seeds = []")).find("seeds") != std::string::npos);
    CHECK(error_of(replace(kAux, "seeds = [1, 2]", "seeds = [4, 4]")).find("seeds") != std::string::npos);
    CHECK(error_of(replace(kAux, "hidden = [3]", "depth = 3")).find("model.depth") != std::string::npos);
    CHECK(error_of(replace(kTask, "class_b = 5", "class_b = 1")).find("poison") != std::string::npos);
    CHECK(error_of(replace(kTask, "sampled_chi = 4", "sampled_chi = 41")).find("sampled_chi") != std::string::npos);
    CHECK(error_of("protocol = \"aux\"\n[model\n").find(":2") != std::string::npos);
    CHECK_FALSE(error_of(kAux).size());
}

TEST_CASE("sweep fields") {
    const auto base = parse_config(kTask);
    const auto a = with_field(base, "teacher.lr", "3e-3");
    CHECK(a.teacher.lr == 3e-3);
    CHECK(a.base == base.base);
    CHECK(with_field(base, "model.filters", "2").model.filters == 2);
    CHECK(with_field(parse_config(kAux), "model.hidden", "[8, 4]").model.hidden == std::vector<std::size_t>{8, 4});
    CHECK(with_field(parse_config(kAux), "noise.resample", "fixed").noise.resample == data::Resample::fixed);
    CHECK_THROWS_AS(with_field(base, "teacher.momentum", "0.9"), ConfigError);
    CHECK_THROWS_AS(with_field(base, "noise.batches", "3"), ConfigError);
    CHECK_THROWS_AS(with_field(base, "seeds", "[1]"), ConfigError);
    CHECK_THROWS_AS(with_field(base, "teacher.lr", "-1.0"), ConfigError);
}

TEST_CASE("config hash ignores seeds only") {
    auto c = parse_config(kTask);
    const auto h = config_hash(c);
    CHECK(h.size() == 16);
    c.seeds = {7, 8, 9};
    CHECK(config_hash(c) == h);
    c.teacher.lr *= 2;
    CHECK(config_hash(c) != h);
}

TEST_CASE("aggregates") {
    auto rec = [](std::uint64_t seed, std::map<std::string, double> m) {
        RunRecord r;
        r.config_hash = "h";
        r.seed = seed;
        r.metrics = std::move(m);
        return r;
    };
    // Hand-computed: mean 0.5, sample sd sqrt(0.26 / 2), sem sd / sqrt(3).
    const auto a = aggregate("x", {rec(1, {{"t", 0.2}, {"u", 1.0}}), rec(2, {{"t", 0.4}, {"u", 3.0}}), rec(3, {{"t", 0.9}})});
    CHECK(a.metrics.at("t").n == 3);
    CHECK(a.metrics.at("t").mean == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(a.metrics.at("t").sem == doctest::Approx(std::sqrt(0.13) / std::sqrt(3.0)).epsilon(1e-14));
    CHECK(a.metrics.at("u").n == 2);
    CHECK(a.metrics.at("u").mean == 2.0);
    CHECK(a.metrics.at("u").sem == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(aggregate("x", {rec(1, {{"t", 0.3}})}).metrics.at("t").sem == 0.0);

    const auto back = Aggregate::from_json(a.to_json());
    CHECK(back.name == "x");
    CHECK(back.metrics == a.metrics);
    CHECK_THROWS_AS(Aggregate::from_json("{\"name\": 1}"), DataError);
}

TEST_CASE("csv output") {
    Aggregate agg;
    agg.name = "m";
    agg.metrics["chi"] = {0.5, 0.1, 3};
    agg.metrics["transmission"] = {0.25, 0.05, 3};
    agg.metrics["other"] = {1.0, 0.0, 3};
    const std::vector<std::pair<std::string, Aggregate>> four{{"cnn1", agg}, {"cnn2", agg}, {"mlp", agg}, {"qnn", agg}};
    const auto csv = tidy_csv("model", four, {"chi", "transmission"});
    CHECK(count_lines(csv) == 1 + 4 * 2);
    CHECK(csv.substr(0, csv.find('\n')) == "axis,value,metric,mean,sem,n");
    CHECK(csv.find("model,qnn,transmission,0.25,0.05,3\n") != std::string::npos);
    CHECK(count_lines(tidy_csv("model", four, {})) == 1 + 4 * 3);
    CHECK(tidy_csv("a", {{"x,y", agg}}, {"chi"}).find("a,\"x,y\",chi") != std::string::npos);
    CHECK_THROWS_AS(tidy_csv("model", {}, {}), DataError);
    CHECK_THROWS_AS(tidy_csv("model", four, {"missing"}), DataError);

    std::vector<SweepRow> rows{{"1e-3", agg}, {"3e-3", agg}, {"1e-2", agg}};
    const auto sweep = sweep_csv("teacher.lr", Protocol::task, rows);
    CHECK(count_lines(sweep) == 1 + rows.size());
    CHECK(sweep.substr(0, sweep.find('\n')) == "teacher.lr,transmission_mean,transmission_sem,chi_mean,chi_sem,n");
}

TEST_CASE("end-to-end runs on a synthetic dataset") {
    FakeData fake;
    TempDir out;
    RunOptions opt;
    opt.data_root = fake.dir.path;

    SUBCASE("aux: per-seed records, aggregate and replay") {
        const auto cfg = parse_config(kAux);
        const auto r1 = run_experiment(cfg, opt);
        REQUIRE(r1.records.size() == 2);
        CHECK(r1.summary.metrics.at("teacher_accuracy").n == 2);
        for (const auto& m : {"teacher_accuracy", "student_accuracy", "transmission", "teacher_drift", "chi_aux"}) {
            CHECK(r1.summary.metrics.count(m) == 1);
        }
        CHECK(r1.records[0].chi.count("chi_aux") == 1);
        CHECK(r1.records[0].to_json().find("wall") == std::string::npos);
        // Stored aggregate equals the one recomputed from the stored records.
        CHECK(aggregate(cfg.name, r1.records).to_json() == r1.summary.to_json());

        const auto r2 = run_experiment(cfg, opt);
        for (std::size_t i = 0; i < 2; ++i) CHECK(r2.records[i].to_json() == r1.records[i].to_json());
        CHECK(r2.summary.to_json() == r1.summary.to_json());

        write_result(r1, out.path / "a");
        CHECK(fs::exists(out.path / "a" / "records" / "seed-1.json"));
        CHECK(fs::exists(out.path / "a" / "records" / "seed-2.json"));
        CHECK(fs::exists(out.path / "a" / "timing.json"));
        CHECK(slurp(out.path / "a" / "aggregate.json") == r1.summary.to_json());
        CHECK(load_config(out.path / "a" / "config.toml") == cfg);
    }

    SUBCASE("checkpoint cache reuse gives identical records") {
        const auto cfg = parse_config(kTask);
        opt.cache_dir = out.path / "cache";
        std::vector<std::string> log;
        opt.log = [&](const std::string& m) { log.push_back(m); };
        const auto fresh = run_experiment(cfg, opt);
        const auto n_ckpt = std::distance(fs::directory_iterator(*opt.cache_dir), fs::directory_iterator{});
        CHECK(n_ckpt == 5);  // base, teacher, student, control teacher, control student
        log.clear();
        const auto cached = run_experiment(cfg, opt);
        CHECK(std::count_if(log.begin(), log.end(), [](const std::string& m) { return m.find("cached") != std::string::npos; }) == 5);
        CHECK(cached.records[0].to_json() == fresh.records[0].to_json());
        opt.cache_dir.reset();
        CHECK(run_experiment(cfg, opt).records[0].to_json() == fresh.records[0].to_json());

        const auto& m = fresh.records[0].metrics;
        for (const auto& k : {"base_flip", "teacher_flip", "student_flip", "control_student_flip", "teacher_drift",
                              "chi", "chi_sampled", "chi_visibility"}) {
            CHECK(m.count(k) == 1);
        }
        CHECK(fresh.records[0].chi.at("chi_sampled").probe_size == 4);
        CHECK(fresh.records[0].chi.at("chi").probe_size == 40);
    }

    SUBCASE("sweep writes one row per value") {
        const auto cfg = parse_config(kTask);
        const auto rows = run_sweep(cfg, "student.lr", {"1e-3", "1e-2"}, opt, out.path / "s");
        CHECK(rows.size() == 2);
        CHECK(count_lines(slurp(out.path / "s" / "sweep.csv")) == 3);
        CHECK(fs::exists(out.path / "s" / "point-1" / "aggregate.json"));
        CHECK_THROWS_AS(run_sweep(cfg, "student.nope", {"1"}, opt, out.path / "t"), ConfigError);
    }

    SUBCASE("missing data is a data error") {
        opt.data_root = out.path / "nowhere";
        CHECK_THROWS_AS(run_experiment(parse_config(kAux), opt), DataError);
    }
}
