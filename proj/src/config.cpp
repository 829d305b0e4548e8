#include "cdd/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "cdd/errors.hpp"

namespace cdd {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

long long parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long out = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError(key + ": expected boolean (0/1/true/false), got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(static_cast<int>(parse_int(key, trim(item))));
    }
    if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
    return out;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

void apply_train_key(TrainConfig& t, const std::string& field, const std::string& key,
                     const std::string& value) {
    if (field == "epochs") t.epochs = static_cast<int>(parse_int(key, value));
    else if (field == "warmup_epochs") t.warmup_epochs = static_cast<int>(parse_int(key, value));
    else if (field == "rggr_activation_epoch")
        t.rggr_activation_epoch = static_cast<int>(parse_int(key, value));
    else if (field == "alpha") t.alpha = parse_double(key, value);
    else if (field == "p") t.p = parse_double(key, value);
    else if (field == "k") t.k = static_cast<int>(parse_int(key, value));
    else if (field == "queue_capacity") t.queue_capacity = static_cast<int>(parse_int(key, value));
    else if (field == "base_lr") t.base_lr = parse_double(key, value);
    else if (field == "peak_lr") t.peak_lr = parse_double(key, value);
    else if (field == "momentum") t.momentum = parse_double(key, value);
    else if (field == "weight_decay") t.weight_decay = parse_double(key, value);
    else if (field == "batch_p") t.batch_p = static_cast<int>(parse_int(key, value));
    else if (field == "batch_s") t.batch_s = static_cast<int>(parse_int(key, value));
    else if (field == "kl_temperature") t.kl_temperature = parse_double(key, value);
    else if (field == "label_smoothing") t.label_smoothing = parse_double(key, value);
    else if (field == "triplet_margin") t.triplet_margin = parse_double(key, value);
    else if (field == "mode") t.mode = parse_train_mode(value);
    else if (field == "init_from_teacher") t.init_from_teacher = parse_bool(key, value);
    else if (field == "prune_lambda") t.prune_lambda = parse_double(key, value);
    else throw ConfigError("unknown key '" + key + "'");
}

}  // namespace

void RunConfig::resolve() {
    model.in_channels = dataset.channels;
    model.input_h = dataset.height;
    model.input_w = dataset.width;
    teacher.mode = TrainMode::teacher;
    teacher.seed = seed;
    train.seed = seed;
}

RunConfig default_run_config() {
    RunConfig rc;
    rc.teacher.epochs = 24;
    rc.teacher.warmup_epochs = 3;
    rc.teacher.mode = TrainMode::teacher;
    rc.resolve();
    return rc;
}

void apply_override(RunConfig& rc, const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    if (v.empty()) throw ConfigError("missing value for field " + key);
    if (key == "seed") {
        rc.seed = static_cast<std::uint64_t>(parse_int(key, v));
        return;
    }
    if (key == "convert.lambda") {
        rc.convert_lambda = parse_double(key, v);
        return;
    }
    if (key == "eval.batch") {
        rc.eval_batch = static_cast<int>(parse_int(key, v));
        return;
    }
    const auto dot = key.find('.');
    if (dot == std::string::npos) throw ConfigError("unknown key '" + key + "'");
    const std::string section = key.substr(0, dot);
    const std::string field = key.substr(dot + 1);
    if (section == "dataset") {
        DatasetSpec& d = rc.dataset;
        if (field == "num_identities") d.num_identities = static_cast<int>(parse_int(key, v));
        else if (field == "images_per_identity")
            d.images_per_identity = static_cast<int>(parse_int(key, v));
        else if (field == "channels") d.channels = static_cast<int>(parse_int(key, v));
        else if (field == "height") d.height = static_cast<int>(parse_int(key, v));
        else if (field == "width") d.width = static_cast<int>(parse_int(key, v));
        else if (field == "jitter") d.jitter = parse_double(key, v);
        else if (field == "seed") d.seed = static_cast<std::uint64_t>(parse_int(key, v));
        else if (field == "train_frac") d.train_frac = parse_double(key, v);
        else if (field == "query_frac") d.query_frac = parse_double(key, v);
        else if (field == "gallery_frac") d.gallery_frac = parse_double(key, v);
        else throw ConfigError("unknown key '" + key + "'");
    } else if (section == "model") {
        if (field == "stage_widths") rc.model.stage_widths = parse_int_list(key, v);
        else if (field == "blocks_per_stage")
            rc.model.blocks_per_stage = static_cast<int>(parse_int(key, v));
        else if (field == "embedding_dim")
            rc.model.embedding_dim = static_cast<int>(parse_int(key, v));
        else throw ConfigError("unknown key '" + key + "'");
    } else if (section == "teacher") {
        apply_train_key(rc.teacher, field, key, v);
    } else if (section == "train") {
        apply_train_key(rc.train, field, key, v);
    } else {
        throw ConfigError("unknown key '" + key + "'");
    }
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    RunConfig rc = default_run_config();
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string stripped = trim(line.substr(0, line.find('#')));
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected 'key = value', got '" + stripped + "'");
        }
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        try {
            apply_override(rc, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    rc.resolve();
    return rc;
}

std::string serialize_run_config(const RunConfig& rc) {
    std::ostringstream os;
    os << "seed=" << rc.seed << "\n";
    const DatasetSpec& d = rc.dataset;
    os << "dataset.num_identities=" << d.num_identities << "\n";
    os << "dataset.images_per_identity=" << d.images_per_identity << "\n";
    os << "dataset.channels=" << d.channels << "\n";
    os << "dataset.height=" << d.height << "\n";
    os << "dataset.width=" << d.width << "\n";
    os << "dataset.jitter=" << fmt_double(d.jitter) << "\n";
    os << "dataset.seed=" << d.seed << "\n";
    os << "dataset.train_frac=" << fmt_double(d.train_frac) << "\n";
    os << "dataset.query_frac=" << fmt_double(d.query_frac) << "\n";
    os << "dataset.gallery_frac=" << fmt_double(d.gallery_frac) << "\n";
    os << "model.stage_widths=" << join_ints(rc.model.stage_widths) << "\n";
    os << "model.blocks_per_stage=" << rc.model.blocks_per_stage << "\n";
    os << "model.embedding_dim=" << rc.model.embedding_dim << "\n";
    auto train_block = [&os](const char* section, const TrainConfig& t) {
        os << section << ".epochs=" << t.epochs << "\n";
        os << section << ".warmup_epochs=" << t.warmup_epochs << "\n";
        os << section << ".rggr_activation_epoch=" << t.rggr_activation_epoch << "\n";
        os << section << ".alpha=" << fmt_double(t.alpha) << "\n";
        os << section << ".p=" << fmt_double(t.p) << "\n";
        os << section << ".k=" << t.k << "\n";
        os << section << ".queue_capacity=" << t.queue_capacity << "\n";
        os << section << ".base_lr=" << fmt_double(t.base_lr) << "\n";
        os << section << ".peak_lr=" << fmt_double(t.peak_lr) << "\n";
        os << section << ".momentum=" << fmt_double(t.momentum) << "\n";
        os << section << ".weight_decay=" << fmt_double(t.weight_decay) << "\n";
        os << section << ".batch_p=" << t.batch_p << "\n";
        os << section << ".batch_s=" << t.batch_s << "\n";
        os << section << ".kl_temperature=" << fmt_double(t.kl_temperature) << "\n";
        os << section << ".label_smoothing=" << fmt_double(t.label_smoothing) << "\n";
        os << section << ".triplet_margin=" << fmt_double(t.triplet_margin) << "\n";
        os << section << ".mode=" << to_string(t.mode) << "\n";
        os << section << ".init_from_teacher=" << (t.init_from_teacher ? 1 : 0) << "\n";
        os << section << ".prune_lambda=" << fmt_double(t.prune_lambda) << "\n";
    };
    train_block("teacher", rc.teacher);
    train_block("train", rc.train);
    os << "convert.lambda=" << fmt_double(rc.convert_lambda) << "\n";
    os << "eval.batch=" << rc.eval_batch << "\n";
    return os.str();
}

}  // namespace cdd
