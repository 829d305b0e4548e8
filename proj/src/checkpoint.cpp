#include "cdd/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cdd/errors.hpp"

namespace cdd {

namespace {

constexpr char kMagic[8] = {'C', 'D', 'D', 'C', 'K', 'P', 'T', '\n'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void write_tensor(std::ostream& os, const std::string& name, std::span<const double> data,
                  const std::vector<int>& shape) {
    write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) write_u64(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(double)));
}

std::string join_csv(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

std::vector<int> parse_csv(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
    return out;
}

// model tensors in a stable order: parameters plus running statistics
std::vector<std::pair<std::string, Tensor>> model_tensors(const Model& m) {
    std::vector<std::pair<std::string, Tensor>> out = m.named_parameters();
    auto stats = [&out](const std::string& prefix, const AffineNorm& n) {
        out.emplace_back(prefix + ".running_mean",
                         Tensor::from_data({n.channels()}, n.running_mean));
        out.emplace_back(prefix + ".running_var",
                         Tensor::from_data({n.channels()}, n.running_var));
    };
    stats("stem.norm", m.stem_norm);
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        if (m.blocks[i].has_norm) stats("block" + std::to_string(i) + ".norm", m.blocks[i].norm);
    }
    return out;
}

}  // namespace

void save_model_checkpoint(const std::string& path, const Model& model, long long step,
                           const std::vector<std::pair<std::string, Tensor>>& extra_tensors,
                           const std::map<std::string, std::string>& extra_meta) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open checkpoint for writing: " + path);

    std::map<std::string, std::string> meta = extra_meta;
    const ModelConfig& c = model.config;
    meta["config.stage_widths"] = join_csv(c.stage_widths);
    meta["config.blocks_per_stage"] = std::to_string(c.blocks_per_stage);
    meta["config.embedding_dim"] = std::to_string(c.embedding_dim);
    meta["config.class_count"] = std::to_string(c.class_count);
    meta["config.in_channels"] = std::to_string(c.in_channels);
    meta["config.input_h"] = std::to_string(c.input_h);
    meta["config.input_w"] = std::to_string(c.input_w);
    meta["config.with_compactors"] = c.with_compactors ? "1" : "0";
    meta["step"] = std::to_string(step);
    std::string meta_text;
    for (const auto& [k, v] : meta) meta_text += k + "=" + v + "\n";

    os.write(kMagic, 8);
    write_u32(os, kVersion);
    write_u64(os, meta_text.size());
    os.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));

    std::vector<std::pair<std::string, Tensor>> tensors = model_tensors(model);
    for (const auto& t : extra_tensors) tensors.push_back(t);
    write_u64(os, tensors.size());
    for (const auto& [name, t] : tensors) write_tensor(os, name, t.data(), t.shape());
    if (!os) throw ConfigError("checkpoint write failed: " + path);
}

LoadedModel load_model_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) {
        throw CompatError("not a checkpoint container: " + path);
    }
    const std::uint32_t version = read_u32(is);
    if (version != kVersion) {
        throw CompatError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint64_t meta_len = read_u64(is);
    std::string meta_text(meta_len, '\0');
    is.read(meta_text.data(), static_cast<std::streamsize>(meta_len));

    LoadedModel out;
    std::stringstream ms(meta_text);
    std::string line;
    while (std::getline(ms, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        out.meta[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto need = [&](const std::string& key) {
        auto it = out.meta.find(key);
        if (it == out.meta.end()) throw CompatError("checkpoint missing meta key " + key);
        return it->second;
    };

    ModelConfig cfg;
    cfg.stage_widths = parse_csv(need("config.stage_widths"));
    cfg.blocks_per_stage = std::stoi(need("config.blocks_per_stage"));
    cfg.embedding_dim = std::stoi(need("config.embedding_dim"));
    cfg.class_count = std::stoi(need("config.class_count"));
    cfg.in_channels = std::stoi(need("config.in_channels"));
    cfg.input_h = std::stoi(need("config.input_h"));
    cfg.input_w = std::stoi(need("config.input_w"));
    cfg.with_compactors = need("config.with_compactors") == "1";
    out.step = std::stoll(need("step"));

    std::map<std::string, Tensor> table;
    const std::uint64_t count = read_u64(is);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t name_len = read_u64(is);
        std::string name(name_len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(name_len));
        const std::uint32_t ndim = read_u32(is);
        std::vector<int> shape;
        for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(read_u64(is)));
        std::vector<double> data(numel(shape));
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!is) throw CompatError("truncated checkpoint at tensor " + name);
        table.emplace(name, Tensor::from_data(shape, std::move(data)));
    }

    auto take = [&table](const std::string& name) {
        auto it = table.find(name);
        if (it == table.end()) throw CompatError("checkpoint missing tensor " + name);
        Tensor t = it->second;
        table.erase(it);
        return t;
    };
    auto maybe_take = [&table](const std::string& name, Tensor* dst) {
        auto it = table.find(name);
        if (it == table.end()) return false;
        *dst = it->second;
        table.erase(it);
        return true;
    };

    Model m;
    m.config = cfg;
    m.stem.kernel = take("stem.kernel");
    m.stem.kernel.set_requires_grad(true);
    m.stem.spec = {cfg.in_channels, m.stem.kernel.dim(0), 3, 3, cfg.input_h % 3, false};
    auto load_norm = [&](const std::string& prefix, AffineNorm& n) {
        n.gamma = take(prefix + ".gamma");
        n.beta = take(prefix + ".beta");
        n.gamma.set_requires_grad(true);
        n.beta.set_requires_grad(true);
        Tensor rm = take(prefix + ".running_mean");
        Tensor rv = take(prefix + ".running_var");
        n.running_mean.assign(rm.data().begin(), rm.data().end());
        n.running_var.assign(rv.data().begin(), rv.data().end());
    };
    load_norm("stem.norm", m.stem_norm);

    const int n_blocks = cfg.num_blocks();
    for (int i = 0; i < n_blocks; ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        ResidualBlock b;
        b.conv3.kernel = take(p + "conv3.kernel");
        b.conv3.kernel.set_requires_grad(true);
        const bool conv3_bias = maybe_take(p + "conv3.bias", &b.conv3.bias);
        if (conv3_bias) b.conv3.bias.set_requires_grad(true);
        b.conv3.spec = {b.conv3.kernel.dim(1), b.conv3.kernel.dim(0), 3, 1, 1, conv3_bias};
        b.has_norm = table.count(p + "norm.gamma") > 0;
        if (b.has_norm) load_norm(p + "norm", b.norm);
        Tensor comp;
        if (maybe_take(p + "compactor.kernel", &comp)) {
            comp.set_requires_grad(true);
            Compactor c;
            c.kernel = comp;
            c.channels = comp.dim(0);
            b.compactor = std::move(c);
        }
        b.conv1.kernel = take(p + "conv1.kernel");
        b.conv1.kernel.set_requires_grad(true);
        b.conv1.bias = take(p + "conv1.bias");
        b.conv1.bias.set_requires_grad(true);
        b.conv1.spec = {b.conv1.kernel.dim(1), b.conv1.kernel.dim(0), 1, 1, 0, true};
        Tensor sk;
        if (maybe_take(p + "shortcut.kernel", &sk)) {
            sk.set_requires_grad(true);
            Conv2dLayer sc;
            sc.kernel = sk;
            sc.bias = take(p + "shortcut.bias");
            sc.bias.set_requires_grad(true);
            sc.spec = {sk.dim(1), sk.dim(0), 1, 1, 0, true};
            b.shortcut = std::move(sc);
        }
        m.blocks.push_back(std::move(b));
    }
    m.emb_w = take("head.emb.w");
    m.emb_b = take("head.emb.b");
    m.cls_w = take("head.cls.w");
    m.cls_b = take("head.cls.b");
    for (Tensor* t : {&m.emb_w, &m.emb_b, &m.cls_w, &m.cls_b}) t->set_requires_grad(true);

    // structural sanity vs the config
    int in_c = m.stem.spec.out_c;
    for (int i = 0; i < n_blocks; ++i) {
        const ResidualBlock& b = m.blocks[static_cast<std::size_t>(i)];
        const int width = cfg.stage_widths[static_cast<std::size_t>(i / cfg.blocks_per_stage)];
        if (b.conv3.spec.in_c != in_c || b.out_channels() != width) {
            throw CompatError("checkpoint block" + std::to_string(i) +
                              " does not match config topology at layer conv3/conv1");
        }
        in_c = width;
    }

    out.extra_tensors = std::move(table);  // whatever remains rides along
    out.model = std::move(m);
    return out;
}

}  // namespace cdd
