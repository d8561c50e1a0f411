#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "taxcl/analysis.hpp"
#include "taxcl/data.hpp"
#include "taxcl/losses.hpp"
#include "taxcl/model.hpp"
#include "taxcl/numerics.hpp"

namespace taxcl::cli {

using nlohmann::json;
namespace fs = std::filesystem;

std::string sha256_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), md, &len) != 1)
        throw std::runtime_error("sha256 failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int k = 0; k < len; ++k) {
        out += hex[md[k] >> 4];
        out += hex[md[k] & 15];
    }
    return out;
}

std::string sha256_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::ios_base::failure("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return sha256_hex(ss.str());
}

namespace {

// Configuration errors are usage errors (exit 2); everything thrown later is
// classified by type in run_cli.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum Cmd : unsigned {
    kGen = 1,
    kTrain = 2,
    kProbe = 4,
    kAnalyze = 8,
    kSweep = 16,
    kGrad = 32,
    kAll = 63,
};

struct OptionSpec {
    const char* name;
    unsigned commands;
    bool flag;
    const char* help;
};

// Every key accepted on the command line or in a config file.
const std::vector<OptionSpec>& option_table() {
    static const std::vector<OptionSpec> table = {
        {"seed", kAll, false, "master seed (env TAXCL_SEED overrides the config file)"},
        {"out", kAll, false, "base output directory (default: runs)"},
        {"run-dir", kAll, false, "exact run directory, overriding <out>/<timestamp>-<hash>"},
        // data
        {"data", kTrain | kProbe | kAnalyze | kSweep, false, "dataset CSV (default: generate)"},
        {"S", kGen | kTrain | kProbe | kAnalyze | kSweep, false, "superclasses"},
        {"C", kGen | kTrain | kProbe | kAnalyze | kSweep, false, "subclasses per superclass"},
        {"n-per-class", kGen | kTrain | kProbe | kAnalyze | kSweep, false, "samples per subclass"},
        {"dim", kGen | kTrain | kProbe | kAnalyze | kSweep, false, "feature dimension"},
        {"sigma-super", kGen | kTrain | kProbe | kAnalyze | kSweep, false, "superclass center spread"},
        {"sigma-sub", kGen | kTrain | kProbe | kAnalyze | kSweep, false, "subclass center spread"},
        {"sigma-noise", kGen | kTrain | kProbe | kAnalyze | kSweep, false, "sample noise"},
        {"train-fraction", kGen | kTrain | kProbe | kAnalyze | kSweep, false, "train split share"},
        // model
        {"hidden", kTrain | kSweep, false, "encoder hidden widths, comma separated"},
        {"rep-dim", kTrain | kSweep, false, "representation width"},
        {"proj-hidden", kTrain | kSweep, false, "projection hidden widths, comma separated"},
        {"emb-dim", kTrain | kSweep, false, "embedding width"},
        {"init-gain", kTrain | kSweep, false, "weight init gain"},
        // training
        {"epochs", kTrain | kSweep, false, "pretraining epochs"},
        {"batch-size", kTrain | kSweep, false, "samples per batch (two views each)"},
        {"lr", kTrain | kSweep, false, "base learning rate"},
        {"momentum", kTrain | kSweep, false, "SGD momentum"},
        {"weight-decay", kTrain | kSweep, false, "weight decay"},
        {"schedule", kTrain | kSweep, false, "cosine-warmup | step-decay | constant"},
        {"warmup", kTrain | kSweep, false, "warmup epochs"},
        {"milestones", kTrain | kSweep, false, "step-decay milestones, comma separated"},
        {"decay-factor", kTrain | kSweep, false, "step-decay factor"},
        {"aug-strength", kTrain | kSweep, false, "augmentation noise multiplier"},
        {"aug-noise", kTrain | kSweep, false, "augmentation noise scale (default: sigma-noise)"},
        {"aug-keep-prob", kTrain | kSweep, false, "augmentation coordinate keep probability"},
        // loss
        {"variant", kTrain | kGrad, false, "supcon | taxcl | taxcl-unsup | suphcl | combined"},
        {"q-mode", kTrain | kSweep | kGrad, false, "identity | importance | importance-debiased"},
        {"tau", kTrain | kSweep | kGrad, false, "temperature"},
        {"tau-plus", kTrain | kSweep | kGrad, false, "debiasing prior"},
        {"alpha", kTrain | kGrad, false, "combined-loss weight"},
        {"epsilon", kTrain | kSweep | kGrad, false, "unsupervised similarity threshold"},
        {"reduction", kTrain | kSweep | kGrad, false, "mean | sum"},
        {"debias-sign", kTrain | kSweep | kGrad, false, "subtract | add"},
        {"positive-scale", kTrain | kSweep | kGrad, false, "taxonomic-set | batch"},
        {"normalization", kTrain | kSweep | kGrad, false, "min-max | affine"},
        // probe
        {"checkpoint", kProbe | kAnalyze, false, "checkpoint file"},
        {"probe-epochs", kProbe | kSweep, false, "probe epochs"},
        {"probe-batch-size", kProbe | kSweep, false, "probe batch size"},
        {"probe-lr", kProbe | kSweep, false, "probe learning rate"},
        {"probe-momentum", kProbe | kSweep, false, "probe momentum"},
        {"probe-weight-decay", kProbe | kSweep, false, "probe weight decay"},
        {"probe-milestones", kProbe | kSweep, false, "probe lr milestones"},
        {"probe-decay-factor", kProbe | kSweep, false, "probe lr decay factor"},
        {"no-standardize", kProbe | kSweep, true, "feed raw representations to the probe"},
        // analysis
        {"which", kAnalyze, false, "spectrum | cosine | retrieve"},
        {"space", kAnalyze, false, "R | Z (default: R for spectrum/cosine, Z for retrieve)"},
        {"split", kAnalyze, false, "all | train | test"},
        {"taxonomy", kAnalyze, false, "spectrum subset: taxonomy id or 'all'"},
        {"rows", kAnalyze, false, "spectrum subset: explicit row indices"},
        {"no-random", kAnalyze, true, "skip the matched random subset"},
        {"centered", kAnalyze, true, "center before the covariance"},
        {"k", kAnalyze, false, "retrieval neighbours"},
        {"retrieve-batch", kAnalyze, false, "retrieval batch samples B (M = 2B)"},
        // sweep
        {"alphas", kSweep, false, "alpha grid, comma separated"},
        {"seeds", kSweep, false, "seeds, comma separated"},
        // gradcheck
        {"instances", kGrad, false, "random batches per variant"},
        {"M", kGrad, false, "batch rows"},
        {"d", kGrad, false, "embedding width"},
        {"fd-step", kGrad, false, "finite-difference step"},
        {"tolerance", kGrad, false, "max relative error"},
        {"corrupt-gradient", kGrad, true, "perturb the analytic gradient (negative control)"},
    };
    return table;
}

bool known_key(const std::string& key) {
    for (const auto& o : option_table())
        if (key == o.name || key == std::string("config")) return true;
    return false;
}

// Resolved key/value view with typed accessors.
class Settings {
public:
    std::map<std::string, std::string> values;

    bool has(const std::string& k) const { return values.count(k) != 0; }
    std::string str(const std::string& k, const std::string& def) const {
        auto it = values.find(k);
        return it == values.end() ? def : it->second;
    }
    double num(const std::string& k, double def) const {
        auto it = values.find(k);
        if (it == values.end()) return def;
        try {
            return parse_double(it->second);
        } catch (const std::exception&) {
            throw UsageError(k + ": expected a number, got '" + it->second + "'");
        }
    }
    std::uint64_t u64(const std::string& k, std::uint64_t def) const {
        auto it = values.find(k);
        if (it == values.end()) return def;
        return parse_u64(k, it->second);
    }
    int integer(const std::string& k, int def) const {
        auto it = values.find(k);
        if (it == values.end()) return def;
        try {
            std::size_t pos = 0;
            const int v = std::stoi(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw UsageError(k + ": expected an integer, got '" + it->second + "'");
        }
    }
    bool flag(const std::string& k) const {
        const std::string v = str(k, "false");
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw UsageError(k + ": expected true/false, got '" + v + "'");
    }
    std::vector<std::size_t> sizes(const std::string& k, std::vector<std::size_t> def) const {
        auto it = values.find(k);
        if (it == values.end()) return def;
        std::vector<std::size_t> out;
        for (const auto& part : split_list(it->second)) out.push_back(parse_u64(k, part));
        return out;
    }
    std::vector<double> doubles(const std::string& k, std::vector<double> def) const {
        auto it = values.find(k);
        if (it == values.end()) return def;
        std::vector<double> out;
        for (const auto& part : split_list(it->second)) {
            try {
                out.push_back(parse_double(part));
            } catch (const std::exception&) {
                throw UsageError(k + ": bad number '" + part + "'");
            }
        }
        return out;
    }

private:
    static std::uint64_t parse_u64(const std::string& k, const std::string& s) {
        std::uint64_t v = 0;
        const auto* end = s.data() + s.size();
        const auto [p, ec] = std::from_chars(s.data(), end, v);
        if (ec != std::errc{} || p != end)
            throw UsageError(k + ": expected a non-negative integer, got '" + s + "'");
        return v;
    }
    static std::vector<std::string> split_list(const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        for (char ch : s) {
            if (ch == ',' || ch == ' ') {
                if (!cur.empty()) out.push_back(cur);
                cur.clear();
            } else {
                cur += ch;
            }
        }
        if (!cur.empty()) out.push_back(cur);
        return out;
    }
};

// Flat "key = value" file; [section] headers only group keys.
void load_config_file(const fs::path& path, Settings& s) {
    if (!fs::exists(path)) throw std::ios_base::failure("config file not found: " + path.string());
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw UsageError(std::string("config file: ") + e.what());
    }
    auto take = [&](const std::string& key, const std::string& value) {
        if (!known_key(key)) throw UsageError("config file: unknown key '" + key + "'");
        s.values[key] = value;
    };
    for (const auto& [key, node] : tree) {
        if (node.empty())
            take(key, node.data());
        else
            for (const auto& [sub, leaf] : node) take(sub, leaf.data());
    }
}

GenSpec gen_spec_from(const Settings& s) {
    GenSpec g;
    g.superclasses = s.integer("S", g.superclasses);
    g.subclasses = s.integer("C", g.subclasses);
    g.n_per_class = s.integer("n-per-class", g.n_per_class);
    g.dim = s.integer("dim", g.dim);
    g.sigma_super = s.num("sigma-super", g.sigma_super);
    g.sigma_sub = s.num("sigma-sub", g.sigma_sub);
    g.sigma_noise = s.num("sigma-noise", g.sigma_noise);
    g.train_fraction = s.num("train-fraction", g.train_fraction);
    g.seed = s.u64("seed", 0);
    try {
        g.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return g;
}

json gen_spec_json(const GenSpec& g) {
    return {{"S", g.superclasses},       {"C", g.subclasses},         {"n_per_class", g.n_per_class},
            {"dim", g.dim},              {"sigma_super", g.sigma_super}, {"sigma_sub", g.sigma_sub},
            {"sigma_noise", g.sigma_noise}, {"train_fraction", g.train_fraction}, {"seed", g.seed}};
}

LossConfig loss_config_from(const Settings& s) {
    LossConfig c;
    try {
        if (s.has("variant")) c.variant = parse_loss_variant(s.str("variant", ""));
        if (s.has("q-mode")) c.q_mode = parse_q_mode(s.str("q-mode", ""));
        if (s.has("reduction")) c.reduction = parse_reduction(s.str("reduction", ""));
        if (s.has("debias-sign")) c.debias_sign = parse_debias_sign(s.str("debias-sign", ""));
        if (s.has("positive-scale"))
            c.positive_scale = parse_positive_scale(s.str("positive-scale", ""));
        if (s.has("normalization"))
            c.normalization = parse_similarity_normalization(s.str("normalization", ""));
        c.tau = s.num("tau", c.tau);
        c.tau_plus = s.num("tau-plus", c.tau_plus);
        c.alpha = s.num("alpha", c.alpha);
        c.epsilon = s.num("epsilon", c.epsilon);
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return c;
}

MlpSpec mlp_spec_from(const Settings& s, std::size_t input_dim) {
    MlpSpec m;
    m.input_dim = input_dim;
    auto hidden = s.sizes("hidden", {64, 64});
    hidden.push_back(static_cast<std::size_t>(s.u64("rep-dim", 32)));
    m.encoder_widths = hidden;
    auto proj = s.sizes("proj-hidden", {32});
    proj.push_back(static_cast<std::size_t>(s.u64("emb-dim", 16)));
    m.projection_widths = proj;
    m.init_gain = s.num("init-gain", m.init_gain);
    try {
        m.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return m;
}

TrainConfig train_config_from(const Settings& s, double default_aug_noise) {
    TrainConfig c;
    c.epochs = s.u64("epochs", c.epochs);
    c.batch_size = s.u64("batch-size", c.batch_size);
    c.lr = s.num("lr", c.lr);
    c.momentum = s.num("momentum", c.momentum);
    c.weight_decay = s.num("weight-decay", c.weight_decay);
    try {
        if (s.has("schedule")) c.schedule = parse_schedule_kind(s.str("schedule", ""));
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    c.warmup_epochs = s.u64("warmup", c.warmup_epochs);
    c.milestones = s.sizes("milestones", c.milestones);
    c.decay_factor = s.num("decay-factor", c.decay_factor);
    c.augment.strength = s.num("aug-strength", c.augment.strength);
    c.augment.noise_scale = s.num("aug-noise", default_aug_noise);
    c.augment.keep_prob = s.num("aug-keep-prob", c.augment.keep_prob);
    c.loss = loss_config_from(s);
    c.seed = s.u64("seed", 0);
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return c;
}

ProbeConfig probe_config_from(const Settings& s) {
    ProbeConfig p;
    p.epochs = s.u64("probe-epochs", p.epochs);
    p.batch_size = s.u64("probe-batch-size", p.batch_size);
    p.lr = s.num("probe-lr", p.lr);
    p.momentum = s.num("probe-momentum", p.momentum);
    p.weight_decay = s.num("probe-weight-decay", p.weight_decay);
    p.milestones = s.sizes("probe-milestones", p.milestones);
    p.decay_factor = s.num("probe-decay-factor", p.decay_factor);
    p.standardize = !s.flag("no-standardize");
    p.seed = s.u64("seed", 0);
    if (p.batch_size < 1) throw UsageError("probe batch size must be >= 1");
    return p;
}

// Dataset from --data or freshly generated from the GenSpec keys.
struct DataSource {
    TaxonomyDataset data;
    json description;
};

DataSource resolve_data(const Settings& s) {
    if (s.has("data")) {
        const fs::path path = s.str("data", "");
        DataSource src{load_csv(path), {}};
        src.description = {{"source", "file"}, {"path", path.string()}, {"sha256", sha256_file(path)}};
        return src;
    }
    const GenSpec g = gen_spec_from(s);
    return {generate(g), {{"source", "generated"}, {"gen", gen_spec_json(g)}}};
}

// --- run directory ---------------------------------------------------------

class RunDir {
public:
    RunDir(const Settings& s, const json& config) : config_text_(config.dump(2) + "\n") {
        const std::string hash = sha256_hex(config_text_).substr(0, 12);
        if (s.has("run-dir")) {
            path_ = s.str("run-dir", "");
        } else {
            const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
            std::tm tm{};
            gmtime_r(&now, &tm);
            char stamp[32];
            std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
            path_ = fs::path(s.str("out", "runs")) / (std::string(stamp) + "-" + hash);
        }
        std::error_code ec;
        fs::create_directories(path_, ec);
        if (ec) throw std::ios_base::failure("cannot create " + path_.string() + ": " + ec.message());
        write_text("config.json", config_text_);
    }

    const fs::path& path() const { return path_; }
    fs::path file(const std::string& name) const { return path_ / name; }

    void write_text(const std::string& name, const std::string& text) {
        std::ofstream os(file(name), std::ios::binary);
        if (!os) throw std::ios_base::failure("cannot open " + file(name).string() + " for writing");
        os << text;
        if (!os) throw std::ios_base::failure("write failed: " + file(name).string());
    }

    template <typename Fn>
    void write_with(const std::string& name, Fn&& fn) {
        std::ostringstream ss;
        fn(ss);
        write_text(name, ss.str());
    }

    // Checksums of every file in the run directory.
    void finish() {
        std::vector<std::string> names;
        for (const auto& entry : fs::directory_iterator(path_))
            if (entry.is_regular_file() && entry.path().filename() != "MANIFEST")
                names.push_back(entry.path().filename().string());
        std::sort(names.begin(), names.end());
        std::string manifest;
        for (const auto& n : names) manifest += sha256_file(file(n)) + "  " + n + "\n";
        write_text("MANIFEST", manifest);
        std::cout << path_.string() << "\n";
    }

private:
    std::string config_text_;
    fs::path path_;
};

json base_config(const std::string& command, const Settings& s) {
    return {{"command", command}, {"seed", s.u64("seed", 0)}};
}

// --- subcommands -----------------------------------------------------------

int cmd_gen_data(const Settings& s) {
    const GenSpec g = gen_spec_from(s);
    for (const auto& w : g.warnings()) std::cerr << "warning: " << w << "\n";
    json config = base_config("gen-data", s);
    config["gen"] = gen_spec_json(g);
    const TaxonomyDataset data = generate(g);
    RunDir run(s, config);
    run.write_with("dataset.csv", [&](std::ostream& os) { write_csv(os, data); });
    run.write_text("gen_spec.json", gen_spec_json(g).dump(2) + "\n");
    run.finish();
    return kOk;
}

json train_section(const TrainConfig& cfg, const MlpSpec& spec) {
    json j = json::parse(to_json(cfg));
    j["mlp"] = json::parse(to_json(spec));
    return j;
}

int cmd_train(const Settings& s) {
    DataSource src = resolve_data(s);
    const double aug_noise = s.num("sigma-noise", GenSpec{}.sigma_noise);
    const TrainConfig cfg = train_config_from(s, aug_noise);
    const MlpSpec spec = mlp_spec_from(s, src.data.dim());
    json config = base_config("train", s);
    config["data"] = src.description;
    config["train"] = train_section(cfg, spec);
    RunDir run(s, config);

    const PretrainResult res = pretrain(src.data, spec, cfg);
    save_checkpoint(run.file("checkpoint.txck"), res.checkpoint);
    run.write_with("trace.csv", [&](std::ostream& os) { write_trace_csv(os, res.trace); });
    run.write_with("epoch_losses.csv", [&](std::ostream& os) {
        os << "epoch,loss\n";
        for (std::size_t e = 0; e < res.epoch_losses.size(); ++e)
            os << e << ',' << format_double(res.epoch_losses[e]) << '\n';
    });
    json summary = {{"variant", to_string(cfg.loss.variant)},
                    {"steps", res.checkpoint.step},
                    {"first_epoch_loss", res.epoch_losses.front()},
                    {"final_epoch_loss", res.epoch_losses.back()}};
    run.write_text("train.json", summary.dump(2) + "\n");
    std::cerr << "final epoch loss " << format_double(res.epoch_losses.back()) << "\n";
    run.finish();
    return kOk;
}

Checkpoint require_checkpoint(const Settings& s) {
    if (!s.has("checkpoint")) throw UsageError("--checkpoint is required");
    return load_checkpoint(s.str("checkpoint", ""));
}

int cmd_probe(const Settings& s) {
    if (!s.has("checkpoint")) throw UsageError("--checkpoint is required");
    const ProbeConfig pc = probe_config_from(s);
    DataSource src = resolve_data(s);
    json config = base_config("probe", s);
    config["data"] = src.description;
    config["checkpoint"] = {{"path", s.str("checkpoint", "")},
                            {"sha256", sha256_file(s.str("checkpoint", ""))}};
    config["probe"] = json::parse(to_json(pc));
    const Checkpoint ckpt = require_checkpoint(s);
    RunDir run(s, config);
    const ProbeResult pr = linear_probe(ckpt, src.data, pc);
    json report = {{"train_accuracy", pr.train_accuracy},
                   {"test_accuracy", pr.test_accuracy},
                   {"accuracy", pr.test_accuracy},
                   {"num_classes", pr.num_classes}};
    run.write_text("probe.json", report.dump(2) + "\n");
    std::cerr << "test accuracy " << format_double(pr.test_accuracy) << "\n";
    run.finish();
    return kOk;
}

int cmd_analyze(const Settings& s) {
    const std::string which = s.str("which", "");
    if (which != "spectrum" && which != "cosine" && which != "retrieve")
        throw UsageError("--which must be spectrum, cosine or retrieve");
    const std::string space = s.str("space", which == "retrieve" ? "Z" : "R");
    if (space != "R" && space != "Z") throw UsageError("--space must be R or Z");
    const std::string split = s.str("split", "all");
    if (split != "all" && split != "train" && split != "test")
        throw UsageError("--split must be all, train or test");
    if (!s.has("checkpoint")) throw UsageError("--checkpoint is required");

    DataSource src = resolve_data(s);
    const std::uint64_t seed = s.u64("seed", 0);
    json analysis = {{"which", which}, {"space", space}, {"split", split}};
    const bool centered = s.flag("centered");
    const bool matched = !s.flag("no-random");
    const std::size_t k = s.u64("k", 5);
    const std::size_t retrieve_b = s.u64("retrieve-batch", 32);
    if (which == "spectrum") {
        analysis["centered"] = centered;
        analysis["matched_random"] = matched;
        analysis["subset"] = s.has("rows") ? "rows:" + s.str("rows", "")
                                           : "taxonomy:" + s.str("taxonomy", "0");
    } else if (which == "retrieve") {
        analysis["k"] = k;
        analysis["retrieve_batch"] = retrieve_b;
    }
    json config = base_config("analyze", s);
    config["data"] = src.description;
    config["checkpoint"] = {{"path", s.str("checkpoint", "")},
                            {"sha256", sha256_file(s.str("checkpoint", ""))}};
    config["analysis"] = analysis;
    const Checkpoint ckpt = require_checkpoint(s);
    if (ckpt.spec.input_dim != src.data.dim())
        throw std::invalid_argument("checkpoint expects " + std::to_string(ckpt.spec.input_dim) +
                                    " features, dataset has " + std::to_string(src.data.dim()));

    // rows of the dataset restricted to the split
    std::vector<std::size_t> idx;
    if (split == "all") {
        idx.resize(src.data.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    } else {
        idx = src.data.indices(split == "train" ? Split::train : Split::test);
    }
    const Matrix x = src.data.x.select_rows(idx);
    std::vector<int> y_gt, y_tax;
    for (auto i : idx) {
        y_gt.push_back(src.data.y_gt[i]);
        y_tax.push_back(src.data.y_tax[i]);
    }
    auto features = [&](const Matrix& in) {
        if (space == "R") return encode(ckpt.spec, ckpt.weights, in);
        return forward(ckpt.spec, ckpt.weights, in).embeddings;
    };

    if (which == "spectrum") {
        SubsetSelector sel = SubsetSelector::of_taxonomy(0);
        if (s.has("rows")) {
            sel = SubsetSelector::of_rows(s.sizes("rows", {}));
            for (auto r : sel.rows)
                if (r >= idx.size()) throw UsageError("--rows index out of range");
        } else if (s.str("taxonomy", "0") == "all") {
            sel = SubsetSelector::all();
        } else {
            sel = SubsetSelector::of_taxonomy(s.integer("taxonomy", 0));
        }
        SeededRng rng(seed, 5);
        const auto reports = spectrum(features(x), y_tax, sel, matched, rng, centered);
        RunDir run(s, config);
        run.write_with("spectrum.csv", [&](std::ostream& os) { write_spectrum_csv(os, reports); });
        run.write_text("spectrum.json", spectrum_summary_json(reports) + "\n");
        run.finish();
    } else if (which == "cosine") {
        const CosineReport rep = cosine_gap(features(x), y_gt, y_tax);
        RunDir run(s, config);
        run.write_with("cosine.csv", [&](std::ostream& os) { write_cosine_csv(os, rep); });
        run.write_text("cosine.json", cosine_summary_json(rep) + "\n");
        run.finish();
    } else {
        // a two-view batch of the training split, as seen during pretraining
        TaxonomyDataset part;
        part.x = x;
        part.y_gt = y_gt;
        part.y_tax = y_tax;
        part.split.assign(idx.size(), Split::train);
        SeededRng rng(seed, 6);
        TrainConfig defaults;
        defaults.augment.noise_scale = s.num("sigma-noise", GenSpec{}.sigma_noise);
        const LabeledBatch batch = sample_two_view_batch(part, retrieve_b, defaults.augment, rng);
        const RetrievalSummary sum =
            retrieve(features(batch.embeddings), batch.y_tax, k, batch.view_pair);
        RunDir run(s, config);
        run.write_with("retrieval.csv", [&](std::ostream& os) { write_retrieval_csv(os, sum); });
        run.write_text("retrieval.json", retrieval_summary_json(sum) + "\n");
        run.finish();
    }
    return kOk;
}

int cmd_sweep(const Settings& s) {
    DataSource src = resolve_data(s);
    const double aug_noise = s.num("sigma-noise", GenSpec{}.sigma_noise);
    const TrainConfig base = train_config_from(s, aug_noise);
    const MlpSpec spec = mlp_spec_from(s, src.data.dim());
    const ProbeConfig pc = probe_config_from(s);
    const auto alphas = s.doubles("alphas", {0.0, 0.25, 0.5, 0.75, 1.0});
    const auto seed_list = s.sizes("seeds", {0, 1, 2});
    const std::vector<std::uint64_t> seeds(seed_list.begin(), seed_list.end());
    json config = base_config("sweep-alpha", s);
    config["data"] = src.description;
    config["train"] = train_section(base, spec);
    config["probe"] = json::parse(to_json(pc));
    config["sweep"] = {{"alphas", alphas}, {"seeds", seeds}};

    try {
        validate_sweep_grid(alphas, seeds);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    RunDir run(s, config);
    const auto rows = alpha_sweep(src.data, spec, base, pc, alphas, seeds);
    std::vector<std::string> hashes;
    json cells = json::array();
    for (const auto& r : rows) {
        hashes.push_back(sha256_hex(r.cell_config).substr(0, 12));
        cells.push_back({{"alpha", r.alpha},
                         {"seed", r.seed},
                         {"accuracy", r.accuracy},
                         {"train_accuracy", r.train_accuracy},
                         {"final_loss", r.final_loss},
                         {"config_hash", hashes.back()},
                         {"config", json::parse(r.cell_config)}});
    }
    run.write_with("sweep.csv", [&](std::ostream& os) { write_sweep_csv(os, rows, hashes); });
    run.write_text("sweep.json", json{{"rows", cells}}.dump(2) + "\n");
    run.finish();
    return kOk;
}

// Random two-view batch with two labels per taxonomy.
LabeledBatch random_batch(std::size_t m, std::size_t d, SeededRng& rng) {
    LabeledBatch b;
    b.embeddings = Matrix(m, d);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < d; ++c) b.embeddings(i, c) = rng.next_gaussian();
    b.embeddings = l2_normalize_rows(b.embeddings).rows;
    const std::size_t classes = std::max<std::size_t>(2, m / 4);
    b.y_gt.resize(m);
    b.y_tax.resize(m);
    b.view_pair.assign(m, std::nullopt);
    for (std::size_t i = 0; i + 1 < m; i += 2) {
        const int y = static_cast<int>(rng.next_below(classes));
        b.y_gt[i] = b.y_gt[i + 1] = y;
        b.y_tax[i] = b.y_tax[i + 1] = y / 2;
        b.view_pair[i] = i + 1;
        b.view_pair[i + 1] = i;
    }
    if (m % 2) {
        b.y_gt[m - 1] = 0;
        b.y_tax[m - 1] = 0;
    }
    return b;
}

int cmd_gradcheck(const Settings& s) {
    const LossConfig base = loss_config_from(s);
    const std::size_t instances = s.u64("instances", 20);
    const std::size_t m = s.u64("M", 16);
    const std::size_t d = s.u64("d", 8);
    const double h = s.num("fd-step", 1e-5);
    const double tol = s.num("tolerance", 1e-6);
    const bool corrupt = s.flag("corrupt-gradient");
    if (m < 4) throw UsageError("--M must be >= 4");
    if (d < 2) throw UsageError("--d must be >= 2");
    if (instances < 1) throw UsageError("--instances must be >= 1");
    if (!(h >= 1e-7 && h <= 1e-3)) throw UsageError("--fd-step must lie in [1e-7, 1e-3]");

    std::vector<LossVariant> variants = {LossVariant::supcon, LossVariant::taxcl_sup,
                                         LossVariant::taxcl_unsup, LossVariant::suphcl,
                                         LossVariant::combined};
    if (s.has("variant")) variants = {base.variant};

    json config = base_config("gradcheck", s);
    config["gradcheck"] = {{"instances", instances}, {"M", m},           {"d", d},
                           {"h", h},                 {"tolerance", tol}, {"corrupt_gradient", corrupt}};
    config["loss"] = {{"tau", base.tau},
                      {"tau_plus", base.tau_plus},
                      {"alpha", base.alpha},
                      {"epsilon", base.epsilon},
                      {"q_mode", to_string(base.q_mode)},
                      {"reduction", to_string(base.reduction)},
                      {"debias_sign", to_string(base.debias_sign)},
                      {"positive_scale", to_string(base.positive_scale)},
                      {"normalization", to_string(base.normalization)}};
    RunDir run(s, config);

    SeededRng rng(s.u64("seed", 0), 7);
    json rows = json::array();
    bool all_pass = true;
    for (LossVariant v : variants) {
        LossConfig cfg = base;
        cfg.variant = v;
        GradCheckReport worst;
        std::size_t worst_instance = 0;
        std::size_t evaluated = 0;
        for (std::size_t n = 0; n < instances; ++n) {
            LabeledBatch batch = random_batch(m, d, rng);
            LossResult res;
            try {
                res = compute_loss(batch, cfg);
            } catch (const LossError&) {
                continue;  // no valid anchor in this draw
            }
            Matrix analytic = res.grad;
            if (corrupt) analytic(0, 0) += 1e-3;
            auto f = [&](const Matrix& z) {
                LabeledBatch p = batch;
                p.embeddings = z;
                return compute_loss(p, cfg).value;
            };
            const GradCheckReport rep = finite_diff_check(f, batch.embeddings, analytic, h);
            ++evaluated;
            if (evaluated == 1 || rep.max_rel_err > worst.max_rel_err) {
                worst = rep;
                worst_instance = n;
            }
        }
        const bool pass = evaluated > 0 && worst.max_rel_err < tol;
        all_pass = all_pass && pass;
        rows.push_back({{"variant", to_string(v)},
                        {"instances", evaluated},
                        {"max_rel_err", worst.max_rel_err},
                        {"instance", worst_instance},
                        {"row", worst.argmax_row},
                        {"col", worst.argmax_col},
                        {"analytic", worst.analytic},
                        {"numeric", worst.numeric},
                        {"pass", pass}});
        std::cerr << (pass ? "pass " : "FAIL ") << to_string(v) << " max rel err "
                  << format_double(worst.max_rel_err) << "\n";
    }
    run.write_text("gradcheck.json",
                   json{{"pass", all_pass}, {"tolerance", tol}, {"variants", rows}}.dump(2) + "\n");
    run.finish();
    return all_pass ? kOk : kCheckFailed;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Taxonomy-aware contrastive learning workbench"};
    app.require_subcommand(1);

    struct Sub {
        const char* name;
        unsigned bit;
        const char* help;
        int (*run)(const Settings&);
        CLI::App* app = nullptr;
    };
    std::vector<Sub> subs = {
        {"gen-data", kGen, "generate a synthetic taxonomy dataset", cmd_gen_data},
        {"train", kTrain, "contrastive pretraining", cmd_train},
        {"probe", kProbe, "linear probe on frozen representations", cmd_probe},
        {"analyze", kAnalyze, "spectrum, cosine gap or retrieval report", cmd_analyze},
        {"sweep-alpha", kSweep, "combined-loss alpha sweep", cmd_sweep},
        {"gradcheck", kGrad, "finite-difference check of all loss gradients", cmd_gradcheck},
    };

    std::map<std::string, std::string> flag_values;
    std::map<std::string, bool> flag_bools;
    std::string config_path;
    for (auto& sub : subs) {
        sub.app = app.add_subcommand(sub.name, sub.help);
        sub.app->add_option("--config", config_path, "key = value config file");
        for (const auto& o : option_table()) {
            if (!(o.commands & sub.bit)) continue;
            const std::string flag = std::string("--") + o.name;
            if (o.flag)
                sub.app->add_flag(flag, flag_bools[o.name], o.help);
            else
                sub.app->add_option(flag, flag_values[o.name], o.help);
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    for (auto& sub : subs) {
        if (!sub.app->parsed()) continue;
        try {
            Settings settings;
            if (!config_path.empty()) load_config_file(config_path, settings);
            if (const char* env = std::getenv("TAXCL_SEED"); env && *env) settings.values["seed"] = env;
            for (const auto& o : option_table()) {
                if (!(o.commands & sub.bit)) continue;
                const auto* opt = sub.app->get_option_no_throw(std::string("--") + o.name);
                if (!opt || opt->count() == 0) continue;
                settings.values[o.name] = o.flag ? "true" : flag_values[o.name];
            }
            return sub.run(settings);
        } catch (const UsageError& e) {
            std::cerr << "error: " << e.what() << "\n";
            return kUsage;
        } catch (const std::ios_base::failure& e) {
            std::cerr << "I/O error: " << e.what() << "\n";
            return kIo;
        } catch (const fs::filesystem_error& e) {
            std::cerr << "I/O error: " << e.what() << "\n";
            return kIo;
        } catch (const FormatError& e) {
            std::cerr << "I/O error: " << e.what() << "\n";
            return kIo;
        } catch (const TrainingDiverged& e) {
            std::cerr << "training diverged: " << e.what() << "\n";
            return kCheckFailed;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return kCheckFailed;
        }
    }
    return kUsage;
}

}  // namespace taxcl::cli
