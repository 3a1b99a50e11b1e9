#include "sublim/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>
#include <toml.hpp>

#include "sublim/kernels.hpp"
#include "sublim/rng.hpp"

#ifndef SUBLIM_DEFAULT_DATA_ROOT
#define SUBLIM_DEFAULT_DATA_ROOT "data"
#endif

namespace sublim::experiment {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(Protocol p) { return p == Protocol::aux ? "aux" : "task"; }

Protocol protocol_from_string(const std::string& s) {
    if (s == "aux") return Protocol::aux;
    if (s == "task") return Protocol::task;
    throw ConfigError("protocol: expected \"aux\" or \"task\", got \"" + s + "\"");
}

// --- TOML reading ------------------------------------------------------------

namespace {

class Section {
public:
    Section(const toml::table* t, std::string path) : t_(t), path_(std::move(path)) {}

    [[nodiscard]] bool present() const { return t_ != nullptr; }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void allow(std::initializer_list<const char*> keys) const {
        if (!t_) return;
        std::set<std::string> ok(keys.begin(), keys.end());
        for (const auto& [k, v] : *t_) {
            if (!ok.count(std::string(k.str()))) throw ConfigError(field(std::string(k.str())) + ": unknown field");
        }
    }

    Section sub(const std::string& key) const {
        if (!t_ || !t_->contains(key)) return {nullptr, field(key)};
        const auto* t = (*t_)[key].as_table();
        if (!t) throw ConfigError(field(key) + ": expected a table");
        return {t, field(key)};
    }

    bool has(const std::string& key) const { return t_ && t_->contains(key); }

    double real(const std::string& key, double fallback) const {
        if (!has(key)) return fallback;
        const auto& n = *t_->get(key);
        if (auto v = n.value<double>(); v && (n.is_floating_point() || n.is_integer())) return *v;
        throw ConfigError(field(key) + ": expected a number");
    }

    std::int64_t integer(const std::string& key, std::int64_t fallback) const {
        if (!has(key)) return fallback;
        const auto* v = t_->get(key)->as_integer();
        if (!v) throw ConfigError(field(key) + ": expected an integer");
        return v->get();
    }

    std::size_t count(const std::string& key, std::size_t fallback) const {
        const auto v = integer(key, static_cast<std::int64_t>(fallback));
        if (v < 0) throw ConfigError(field(key) + ": must be non-negative");
        return static_cast<std::size_t>(v);
    }

    bool boolean(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const auto* v = t_->get(key)->as_boolean();
        if (!v) throw ConfigError(field(key) + ": expected true or false");
        return v->get();
    }

    std::string text(const std::string& key, const std::string& fallback) const {
        if (!has(key)) return fallback;
        const auto* v = t_->get(key)->as_string();
        if (!v) throw ConfigError(field(key) + ": expected a string");
        return v->get();
    }

    std::vector<std::int64_t> integers(const std::string& key, std::vector<std::int64_t> fallback) const {
        if (!has(key)) return fallback;
        const auto* a = t_->get(key)->as_array();
        if (!a) throw ConfigError(field(key) + ": expected an array of integers");
        std::vector<std::int64_t> out;
        for (const auto& e : *a) {
            const auto* v = e.as_integer();
            if (!v || v->get() < 0) throw ConfigError(field(key) + ": expected non-negative integers");
            out.push_back(v->get());
        }
        return out;
    }

private:
    const toml::table* t_;
    std::string path_;
};

// Rethrows the library errors with the field name in front.
template <class F>
auto at_field(const std::string& field, F&& f) {
    try {
        return f();
    } catch (const ConfigError& e) {
        throw ConfigError(field + ": " + e.what());
    }
}

training::TrainConfig read_train(const Section& s, const training::TrainConfig& fallback) {
    s.allow({"lr", "epochs", "batch_size"});
    training::TrainConfig c;
    c.lr = s.real("lr", fallback.lr);
    c.epochs = s.count("epochs", fallback.epochs);
    c.batch_size = s.count("batch_size", fallback.batch_size);
    at_field(s.field("*"), [&] { c.validate(); return 0; });
    return c;
}

toml::table write_train(const training::TrainConfig& c) {
    return toml::table{{"lr", c.lr},
                       {"epochs", static_cast<std::int64_t>(c.epochs)},
                       {"batch_size", static_cast<std::int64_t>(c.batch_size)}};
}

std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// 128-bit content key from two independent FNV passes.
std::string digest(const std::string& s) { return hex64(fnv1a(s)) + hex64(fnv1a("sublim:" + s)); }

std::string num(double x) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof buf, x);
    return {buf, r.ptr};
}

std::string csv_cell(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

void write_text(const fs::path& path, const std::string& text) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError(DataError::Kind::io, "cannot write " + tmp.string());
        out << text;
        if (!out) throw DataError(DataError::Kind::io, "short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

}  // namespace

void ExperimentConfig::validate() const {
    if (name.empty()) throw ConfigError("name: must not be empty");
    if (profile != "desk" && profile != "paper") throw ConfigError("profile: expected \"desk\" or \"paper\"");
    if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
        throw ConfigError("seeds: duplicate seed");
    }
    if (n_train == 0) throw ConfigError("n_train: must be positive");
    const Channel want = protocol == Protocol::aux ? Channel::aux : Channel::task;
    if (model.channel != want) throw ConfigError("model: channel does not match protocol " + to_string(protocol));
    at_field("model", [&] { model.validate(); return 0; });
    at_field("teacher", [&] { teacher.validate(); return 0; });
    at_field("student", [&] { student.validate(); return 0; });
    if (protocol == Protocol::aux) {
        at_field("noise", [&] { noise.validate(); return 0; });
        if (model.arch != Arch::qnn && noise.kind != data::NoiseKind::uniform784) {
            throw ConfigError("noise.kind: classical models take uniform784 noise");
        }
        if (diagnostics.chi || diagnostics.sampled_chi || diagnostics.control) {
            throw ConfigError("diagnostics: chi, sampled_chi and control belong to the task protocol");
        }
    } else {
        at_field("base", [&] { base.validate(); return 0; });
        at_field("poison", [&] { poison.validate(); return 0; });
        if (diagnostics.chi_aux) throw ConfigError("diagnostics.chi_aux: belongs to the aux protocol");
        if (diagnostics.sampled_chi > n_train) throw ConfigError("diagnostics.sampled_chi: exceeds n_train");
    }
    if (!(diagnostics.lambda > 0.0)) throw ConfigError("diagnostics.lambda: must be positive");
    if (!(diagnostics.cg_tol > 0.0)) throw ConfigError("diagnostics.cg_tol: must be positive");
    if (diagnostics.cg_max_iters == 0) throw ConfigError("diagnostics.cg_max_iters: must be positive");
}

ExperimentConfig parse_config(const std::string& toml_text, const std::string& origin) {
    toml::table root;
    try {
        root = toml::parse(toml_text, origin);
    } catch (const toml::parse_error& e) {
        std::ostringstream msg;
        msg << origin << ":" << e.source().begin.line << ": " << e.description();
        throw ConfigError(msg.str());
    }
    const Section top(&root, "");
    ExperimentConfig c;
    c.protocol = protocol_from_string(top.text("protocol", "aux"));
    const bool aux = c.protocol == Protocol::aux;
    if (aux) {
        top.allow({"name", "profile", "protocol", "n_train", "seeds", "model", "teacher", "student", "noise",
                   "diagnostics"});
    } else {
        top.allow({"name", "profile", "protocol", "n_train", "seeds", "model", "base", "teacher", "student",
                   "poison", "diagnostics"});
    }
    c.name = top.text("name", c.name);
    c.profile = top.text("profile", c.profile);
    c.n_train = top.count("n_train", c.n_train);
    c.seeds.clear();
    for (auto s : top.integers("seeds", {1})) c.seeds.push_back(static_cast<std::uint64_t>(s));

    const auto m = top.sub("model");
    if (!m.present()) throw ConfigError("model: section is required");
    c.model.arch = at_field(m.field("arch"), [&] { return arch_from_string(m.text("arch", "mlp")); });
    c.model.channel = aux ? Channel::aux : Channel::task;
    switch (c.model.arch) {
        case Arch::qnn:
            m.allow({"arch", "depth"});
            c.model.depth = static_cast<int>(m.integer("depth", c.model.depth));
            break;
        case Arch::mlp: {
            m.allow({"arch", "hidden"});
            c.model.hidden.clear();
            for (auto h : m.integers("hidden", {4})) c.model.hidden.push_back(static_cast<std::size_t>(h));
            break;
        }
        case Arch::cnn:
            m.allow({"arch", "filters"});
            c.model.filters = m.count("filters", c.model.filters);
            break;
    }

    c.teacher = read_train(top.sub("teacher"), c.teacher);
    c.student = read_train(top.sub("student"), c.student);
    if (aux) {
        const auto n = top.sub("noise");
        n.allow({"kind", "batches", "batch_size", "resample"});
        c.noise.kind = at_field(n.field("kind"), [&] { return data::noise_kind_from_string(n.text("kind", "uniform784")); });
        c.noise.batches = n.count("batches", c.noise.batches);
        c.noise.batch_size = n.count("batch_size", c.noise.batch_size);
        c.noise.resample =
            at_field(n.field("resample"), [&] { return data::resample_from_string(n.text("resample", "fixed")); });
    } else {
        c.base = read_train(top.sub("base"), c.base);
        const auto p = top.sub("poison");
        p.allow({"class_a", "class_b"});
        c.poison.class_a = static_cast<int>(p.integer("class_a", c.poison.class_a));
        c.poison.class_b = static_cast<int>(p.integer("class_b", c.poison.class_b));
    }

    const auto d = top.sub("diagnostics");
    d.allow({"chi", "sampled_chi", "chi_aux", "control", "lambda", "cg_tol", "cg_max_iters"});
    auto& g = c.diagnostics;
    g.chi = d.boolean("chi", g.chi);
    g.sampled_chi = d.count("sampled_chi", g.sampled_chi);
    g.chi_aux = d.boolean("chi_aux", g.chi_aux);
    g.control = d.boolean("control", g.control);
    g.lambda = d.real("lambda", g.lambda);
    g.cg_tol = d.real("cg_tol", g.cg_tol);
    g.cg_max_iters = d.count("cg_max_iters", g.cg_max_iters);

    c.validate();
    return c;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

std::string to_toml(const ExperimentConfig& c) {
    toml::table root;
    root.insert("name", c.name);
    root.insert("profile", c.profile);
    root.insert("protocol", to_string(c.protocol));
    root.insert("n_train", static_cast<std::int64_t>(c.n_train));
    toml::array seeds;
    for (auto s : c.seeds) seeds.push_back(static_cast<std::int64_t>(s));
    root.insert("seeds", seeds);

    toml::table m{{"arch", to_string(c.model.arch)}};
    switch (c.model.arch) {
        case Arch::qnn: m.insert("depth", static_cast<std::int64_t>(c.model.depth)); break;
        case Arch::mlp: {
            toml::array h;
            for (auto w : c.model.hidden) h.push_back(static_cast<std::int64_t>(w));
            m.insert("hidden", h);
            break;
        }
        case Arch::cnn: m.insert("filters", static_cast<std::int64_t>(c.model.filters)); break;
    }
    root.insert("model", m);
    if (c.protocol == Protocol::task) {
        root.insert("base", write_train(c.base));
        root.insert("poison", toml::table{{"class_a", c.poison.class_a}, {"class_b", c.poison.class_b}});
    } else {
        root.insert("noise", toml::table{{"kind", data::to_string(c.noise.kind)},
                                         {"batches", static_cast<std::int64_t>(c.noise.batches)},
                                         {"batch_size", static_cast<std::int64_t>(c.noise.batch_size)},
                                         {"resample", data::to_string(c.noise.resample)}});
    }
    root.insert("teacher", write_train(c.teacher));
    root.insert("student", write_train(c.student));
    const auto& g = c.diagnostics;
    toml::table d{{"lambda", g.lambda},
                  {"cg_tol", g.cg_tol},
                  {"cg_max_iters", static_cast<std::int64_t>(g.cg_max_iters)}};
    if (c.protocol == Protocol::task) {
        d.insert("chi", g.chi);
        d.insert("sampled_chi", static_cast<std::int64_t>(g.sampled_chi));
        d.insert("control", g.control);
    } else {
        d.insert("chi_aux", g.chi_aux);
    }
    root.insert("diagnostics", d);

    std::ostringstream os;
    os << root << '\n';
    return os.str();
}

std::string config_hash(const ExperimentConfig& cfg) {
    auto c = cfg;
    c.seeds.clear();
    return hex64(fnv1a(to_toml(c)));
}

ExperimentConfig with_field(const ExperimentConfig& cfg, const std::string& field, const std::string& value) {
    if (field == "seeds") throw ConfigError("seeds: cannot be swept (it is the ensemble axis)");
    auto root = toml::parse(to_toml(cfg));
    toml::table* parent = &root;
    std::string key = field;
    for (auto dot = key.find('.'); dot != std::string::npos; dot = key.find('.')) {
        const std::string head = key.substr(0, dot);
        auto* next = parent->get_as<toml::table>(head);
        if (!next) throw ConfigError(field + ": unknown field");
        parent = next;
        key = key.substr(dot + 1);
    }
    if (!parent->contains(key)) throw ConfigError(field + ": unknown field");
    toml::table parsed;
    try {
        parsed = toml::parse("v = " + value);
    } catch (const toml::parse_error&) {
        parsed = toml::table{{"v", value}};  // bare words are strings
    }
    parent->insert_or_assign(key, *parsed.get("v"));
    std::ostringstream os;
    os << root;
    return parse_config(os.str(), field + "=" + value);
}

std::vector<std::string> headline_metrics(Protocol p) {
    if (p == Protocol::aux) return {"teacher_accuracy", "student_accuracy", "transmission", "teacher_drift", "chi_aux"};
    return {"teacher_flip", "student_flip", "transmission", "teacher_drift", "chi"};
}

// --- records -----------------------------------------------------------------

namespace {

json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

}  // namespace

std::string RunRecord::to_json() const {
    json j;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["metrics"] = json::object();
    for (const auto& [k, v] : metrics) j["metrics"][k] = finite_or_null(v);
    j["chi"] = json::object();
    for (const auto& [k, r] : chi) j["chi"][k] = json::parse(r.to_json());
    j["notes"] = notes;
    return j.dump(2) + "\n";
}

std::string Aggregate::to_json() const {
    json j;
    j["name"] = name;
    j["config_hash"] = config_hash;
    j["metrics"] = json::object();
    for (const auto& [k, s] : metrics) {
        j["metrics"][k] = {{"mean", finite_or_null(s.mean)}, {"sem", finite_or_null(s.sem)}, {"n", s.n}};
    }
    return j.dump(2) + "\n";
}

Aggregate Aggregate::from_json(const std::string& text) {
    Aggregate a;
    try {
        const auto j = json::parse(text);
        a.name = j.at("name").get<std::string>();
        a.config_hash = j.at("config_hash").get<std::string>();
        for (const auto& [k, v] : j.at("metrics").items()) {
            MetricSummary s;
            s.mean = v.at("mean").is_null() ? NAN : v.at("mean").get<double>();
            s.sem = v.at("sem").is_null() ? NAN : v.at("sem").get<double>();
            s.n = v.at("n").get<std::size_t>();
            a.metrics[k] = s;
        }
    } catch (const json::exception& e) {
        throw DataError(DataError::Kind::invalid, std::string("aggregate json: ") + e.what());
    }
    return a;
}

Aggregate aggregate(const std::string& name, const std::vector<RunRecord>& records) {
    Aggregate a;
    a.name = name;
    if (!records.empty()) a.config_hash = records.front().config_hash;
    std::map<std::string, std::vector<double>> values;
    for (const auto& r : records) {
        for (const auto& [k, v] : r.metrics) values[k].push_back(v);
    }
    for (const auto& [k, xs] : values) {
        MetricSummary s;
        s.n = xs.size();
        double sum = 0.0;
        for (double x : xs) sum += x;
        s.mean = sum / static_cast<double>(s.n);
        if (s.n > 1) {
            double ss = 0.0;
            for (double x : xs) ss += (x - s.mean) * (x - s.mean);
            s.sem = std::sqrt(ss / static_cast<double>(s.n - 1)) / std::sqrt(static_cast<double>(s.n));
        }
        a.metrics[k] = s;
    }
    return a;
}

// --- running -----------------------------------------------------------------

fs::path default_data_root() {
    if (const char* env = std::getenv("SUBLIM_DATA_ROOT"); env && *env) return env;
    return SUBLIM_DEFAULT_DATA_ROOT;
}

namespace {

struct Datasets {
    data::LabeledSet mnist_train, mnist_test, fashion_train, fashion_test;
};

data::LabeledSet head(const data::LabeledSet& s, std::size_t n) {
    data::LabeledSet out = s;
    n = std::min(n, s.size());
    out.labels.resize(n);
    out.inputs.resize(n * s.dim);
    return out;
}

Datasets load_datasets(const ExperimentConfig& cfg, const fs::path& root) {
    Datasets d;
    d.mnist_train = data::load_task(root, data::Task::mnist, data::Split::train);
    d.mnist_test = head(data::load_task(root, data::Task::mnist, data::Split::test), data::kEvalExamples);
    if (cfg.protocol == Protocol::task) {
        d.fashion_train = data::load_task(root, data::Task::fashion, data::Split::train);
        d.fashion_test = head(data::load_task(root, data::Task::fashion, data::Split::test), data::kEvalExamples);
    }
    return d;
}

json train_json(const training::TrainConfig& c) {
    return {{"lr", c.lr}, {"epochs", c.epochs}, {"batch_size", c.batch_size}};
}

class StageCache {
public:
    explicit StageCache(const RunOptions& opt) : opt_(opt) {}

    template <class F>
    training::Checkpoint get(const std::string& label, const json& key_doc, F&& train) {
        const std::string key = digest(key_doc.dump());
        last_key = key;
        if (opt_.cache_dir) {
            const auto path = *opt_.cache_dir / (key + ".ckpt");
            if (fs::exists(path)) {
                try {
                    auto c = training::load_checkpoint(path);
                    log(label + ": cached " + key);
                    return c;
                } catch (const DataError&) {
                    log(label + ": unreadable cache entry, retraining");
                }
            }
        }
        const auto t0 = std::chrono::steady_clock::now();
        auto c = train();
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log(label + ": trained in " + num(std::round(secs * 10) / 10) + " s");
        if (opt_.cache_dir) {
            fs::create_directories(*opt_.cache_dir);
            training::save_checkpoint(c, *opt_.cache_dir / (key + ".ckpt"));
        }
        return c;
    }

    void log(const std::string& msg) const {
        if (opt_.log) opt_.log(msg);
    }

    std::string last_key;

private:
    const RunOptions& opt_;
};

void add_chi(RunRecord& rec, const std::string& name, const diagnostics::ChiReport& r) {
    rec.chi[name] = r;
    rec.metrics[name] = r.chi;
    rec.metrics[name + "_visibility"] = r.norm_visibility;
    rec.metrics[name + "_cg_iters"] = static_cast<double>(r.cg_iters);
    if (!r.cg_converged) rec.notes.push_back(name + ": CG did not reach the tolerance");
}

void add_ratio(RunRecord& rec, const std::string& name, double student, double teacher) {
    try {
        rec.metrics[name] = diagnostics::transmission_ratio(student, teacher);
    } catch (const NumericalError& e) {
        rec.notes.push_back(name + ": " + e.what());
    }
}

void run_aux(const ExperimentConfig& cfg, std::uint64_t seed, const Datasets& d, StageCache& cache,
             RunRecord& rec) {
    const auto model = make_model(cfg.model);
    const auto train = data::take_train_subset(d.mnist_train, cfg.n_train, seed);
    const auto init = training::initial_checkpoint(cfg.model, seed);
    json key = {{"stage", "teacher"}, {"model", cfg.model.describe()}, {"seed", seed},
                {"n_train", cfg.n_train}, {"train", train_json(cfg.teacher)}};
    const auto teacher = cache.get("teacher", key, [&] {
        return training::train_teacher_aux(*model, init, train, cfg.teacher);
    });
    key = {{"stage", "student"}, {"parent", cache.last_key}, {"train", train_json(cfg.student)},
           {"noise", {data::to_string(cfg.noise.kind), cfg.noise.batches, cfg.noise.batch_size,
                      data::to_string(cfg.noise.resample)}}};
    const auto student = cache.get("student", key, [&] {
        return training::distill_aux(*model, init, teacher, cfg.noise, cfg.student);
    });

    const LogitBlock mnist = model->layout().mnist;
    rec.metrics["init_accuracy"] = diagnostics::accuracy(*model, init.params, d.mnist_test, mnist);
    rec.metrics["teacher_accuracy"] = diagnostics::accuracy(*model, teacher.params, d.mnist_test, mnist);
    rec.metrics["student_accuracy"] = diagnostics::accuracy(*model, student.params, d.mnist_test, mnist);
    add_ratio(rec, "transmission", rec.metrics["student_accuracy"], rec.metrics["teacher_accuracy"]);
    rec.metrics["teacher_drift"] = training::drift_norm(teacher, init);
    rec.metrics["student_drift"] = training::drift_norm(student, init);
    rec.metrics["student_loss"] = student.metrics.at("final_loss");

    if (cfg.diagnostics.chi_aux) {
        const diagnostics::CgOptions opt{cfg.diagnostics.lambda, cfg.diagnostics.cg_tol, cfg.diagnostics.cg_max_iters};
        const auto noise = data::make_noise(cfg.noise, seed, 0);
        cache.log("chi_aux over " + std::to_string(noise.size()) + " noise inputs");
        add_chi(rec, "chi_aux", diagnostics::chi_aux(*model, init.params, teacher.params, noise.rows(), train, opt));
    }
}

void run_task(const ExperimentConfig& cfg, std::uint64_t seed, const Datasets& d, StageCache& cache,
              RunRecord& rec) {
    const auto model = make_model(cfg.model);
    const auto mnist = data::take_train_subset(d.mnist_train, cfg.n_train, seed);
    const auto fashion = data::take_train_subset(d.fashion_train, cfg.n_train, seed);
    const auto poisoned = data::poison_pair(fashion, cfg.poison);
    const auto init = training::initial_checkpoint(cfg.model, seed);
    const json pair = {cfg.poison.class_a, cfg.poison.class_b};

    json key = {{"stage", "clean_base"}, {"model", cfg.model.describe()}, {"seed", seed},
                {"n_train", cfg.n_train}, {"train", train_json(cfg.base)}};
    const auto base = cache.get("base", key, [&] {
        return training::train_base_joint(*model, init, mnist, fashion, cfg.base);
    });
    const std::string base_key = cache.last_key;
    key = {{"stage", "poison_teacher"}, {"parent", base_key}, {"train", train_json(cfg.teacher)}, {"pair", pair}};
    const auto teacher = cache.get("teacher", key, [&] {
        return training::poison_teacher(*model, base, mnist, poisoned, cfg.teacher);
    });
    key = {{"stage", "student"}, {"parent", cache.last_key}, {"train", train_json(cfg.student)}};
    const auto student = cache.get("student", key, [&] {
        return training::distill_task(*model, base, teacher, mnist, cfg.student);
    });

    const auto layout = model->layout();
    auto flip = [&](const training::Checkpoint& c) {
        return diagnostics::pooled_flip_rate(*model, c.params, d.fashion_test, cfg.poison);
    };
    auto mnist_acc = [&](const training::Checkpoint& c) {
        return diagnostics::accuracy(*model, c.params, d.mnist_test, layout.mnist);
    };
    rec.metrics["base_flip"] = flip(base);
    rec.metrics["base_mnist_accuracy"] = mnist_acc(base);
    rec.metrics["base_fashion_accuracy"] = diagnostics::accuracy(*model, base.params, d.fashion_test, layout.second);
    rec.metrics["teacher_flip"] = flip(teacher);
    rec.metrics["teacher_mnist_accuracy"] = mnist_acc(teacher);
    rec.metrics["student_flip"] = flip(student);
    rec.metrics["student_mnist_accuracy"] = mnist_acc(student);
    add_ratio(rec, "transmission", rec.metrics["student_flip"], rec.metrics["teacher_flip"]);
    rec.metrics["teacher_drift"] = training::drift_norm(teacher, base);
    rec.metrics["student_drift"] = training::drift_norm(student, base);

    if (cfg.diagnostics.control) {
        // Same fine-tuning with clean labels, then the same distillation.
        key = {{"stage", "poison_teacher"}, {"parent", base_key}, {"train", train_json(cfg.teacher)},
               {"pair", nullptr}};
        const auto clean = cache.get("control teacher", key, [&] {
            return training::poison_teacher(*model, base, mnist, fashion, cfg.teacher);
        });
        key = {{"stage", "student"}, {"parent", cache.last_key}, {"train", train_json(cfg.student)}};
        const auto control = cache.get("control student", key, [&] {
            return training::distill_task(*model, base, clean, mnist, cfg.student);
        });
        rec.metrics["control_teacher_flip"] = flip(clean);
        rec.metrics["control_student_flip"] = flip(control);
    }

    const diagnostics::CgOptions opt{cfg.diagnostics.lambda, cfg.diagnostics.cg_tol, cfg.diagnostics.cg_max_iters};
    const auto swapped = data::pair_subset_swapped(fashion, cfg.poison);
    if (cfg.diagnostics.sampled_chi) {
        cache.log("sampled chi over " + std::to_string(cfg.diagnostics.sampled_chi) + " public inputs");
        add_chi(rec, "chi_sampled",
                diagnostics::chi_task(*model, base.params, teacher.params, head(mnist, cfg.diagnostics.sampled_chi),
                                      swapped, opt));
    }
    if (cfg.diagnostics.chi) {
        cache.log("chi over " + std::to_string(mnist.size()) + " public inputs");
        add_chi(rec, "chi", diagnostics::chi_task(*model, base.params, teacher.params, mnist, swapped, opt));
    }
}

RunRecord run_one(const ExperimentConfig& cfg, std::uint64_t seed, const Datasets& d, const RunOptions& opt) {
    const auto t0 = std::chrono::steady_clock::now();
    RunRecord rec;
    rec.config_hash = config_hash(cfg);
    rec.seed = seed;
    StageCache cache(opt);
    cache.log(cfg.name + " seed " + std::to_string(seed));
    if (cfg.protocol == Protocol::aux) {
        run_aux(cfg, seed, d, cache, rec);
    } else {
        run_task(cfg, seed, d, cache, rec);
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

}  // namespace

RunRecord run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opt) {
    cfg.validate();
    return run_one(cfg, seed, load_datasets(cfg, opt.data_root), opt);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opt) {
    cfg.validate();
    const auto d = load_datasets(cfg, opt.data_root);
    ExperimentResult out;
    out.config = cfg;
    for (auto seed : cfg.seeds) out.records.push_back(run_one(cfg, seed, d, opt));
    out.summary = aggregate(cfg.name, out.records);
    return out;
}

void write_result(const ExperimentResult& result, const fs::path& dir) {
    fs::create_directories(dir / "records");
    write_text(dir / "config.toml", to_toml(result.config));
    json timing = json::object();
    double total = 0.0;
    for (const auto& r : result.records) {
        write_text(dir / "records" / ("seed-" + std::to_string(r.seed) + ".json"), r.to_json());
        timing["seconds"][std::to_string(r.seed)] = r.wall_seconds;
        total += r.wall_seconds;
    }
    timing["total_seconds"] = total;
    write_text(dir / "aggregate.json", result.summary.to_json());
    write_text(dir / "timing.json", timing.dump(2) + "\n");
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const std::string& axis,
                                const std::vector<std::string>& values, const RunOptions& opt,
                                const fs::path& out_dir) {
    if (values.empty()) throw ConfigError("sweep: no values given for " + axis);
    std::vector<ExperimentConfig> points;
    for (const auto& v : values) {
        auto c = with_field(cfg, axis, v);
        c.name = cfg.name + "/" + axis + "=" + v;
        points.push_back(std::move(c));
    }
    std::vector<SweepRow> rows;
    for (std::size_t i = 0; i < points.size(); ++i) {
        auto result = run_experiment(points[i], opt);
        write_result(result, out_dir / ("point-" + std::to_string(i)));
        rows.push_back({values[i], result.summary});
    }
    write_text(out_dir / "sweep.csv", sweep_csv(axis, cfg.protocol, rows));
    return rows;
}

std::string sweep_csv(const std::string& axis, Protocol p, const std::vector<SweepRow>& rows) {
    std::vector<std::string> cols;
    for (const auto& m : headline_metrics(p)) {
        const bool any = std::any_of(rows.begin(), rows.end(), [&](const SweepRow& r) { return r.summary.metrics.count(m); });
        if (any) cols.push_back(m);
    }
    std::string out = csv_cell(axis);
    for (const auto& m : cols) out += "," + m + "_mean," + m + "_sem";
    out += ",n\n";
    for (const auto& r : rows) {
        out += csv_cell(r.value);
        std::size_t n = 0;
        for (const auto& m : cols) {
            auto it = r.summary.metrics.find(m);
            if (it == r.summary.metrics.end()) {
                out += ",,";
            } else {
                out += "," + num(it->second.mean) + "," + num(it->second.sem);
                n = std::max(n, it->second.n);
            }
        }
        out += "," + std::to_string(n) + "\n";
    }
    return out;
}

std::string tidy_csv(const std::string& axis, const std::vector<std::pair<std::string, Aggregate>>& points,
                     const std::vector<std::string>& metrics) {
    if (points.empty()) throw DataError(DataError::Kind::invalid, "emit: no records to emit");
    std::string out = "axis,value,metric,mean,sem,n\n";
    for (const auto& [value, agg] : points) {
        auto emit = [&](const std::string& m, const MetricSummary& s) {
            out += csv_cell(axis) + "," + csv_cell(value) + "," + csv_cell(m) + "," + num(s.mean) + "," +
                   num(s.sem) + "," + std::to_string(s.n) + "\n";
        };
        if (metrics.empty()) {
            for (const auto& [m, s] : agg.metrics) emit(m, s);
        } else {
            for (const auto& m : metrics) {
                auto it = agg.metrics.find(m);
                if (it == agg.metrics.end()) {
                    throw DataError(DataError::Kind::invalid, "emit: " + value + " has no metric " + m);
                }
                emit(m, it->second);
            }
        }
    }
    return out;
}

}  // namespace sublim::experiment
