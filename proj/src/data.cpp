#include "cdd/data.hpp"

#include <algorithm>
#include <cmath>

#include "cdd/errors.hpp"

namespace cdd {

namespace {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
    return mix64(mix64(mix64(a) ^ b) ^ c);
}

struct ImageView {
    double* data;
    int c, h, w;
    double& at(int ch, int y, int x) {
        return data[(static_cast<std::size_t>(ch) * h + y) * w + x];
    }
};

void fill_rect(ImageView img, int x0, int y0, int rw, int rh, const double* color) {
    for (int ch = 0; ch < img.c; ++ch)
        for (int y = y0; y < std::min(y0 + rh, img.h); ++y)
            for (int x = x0; x < std::min(x0 + rw, img.w); ++x)
                img.at(ch, y, x) = color[std::min(ch, 2)];
}

void fill_disc(ImageView img, double cx, double cy, double r, const double* color) {
    for (int ch = 0; ch < img.c; ++ch)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                const double dx = x - cx, dy = y - cy;
                if (dx * dx + dy * dy <= r * r) img.at(ch, y, x) = color[std::min(ch, 2)];
            }
}

// One identity = a seeded layout of colored rectangles and a disc over a
// colored background.
Tensor identity_prototype(const DatasetSpec& spec, int id) {
    std::mt19937_64 rng(mix_seed(spec.seed, 0x1D, static_cast<std::uint64_t>(id)));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    Tensor img = Tensor::zeros({spec.channels, spec.height, spec.width});
    ImageView v{img.data().data(), spec.channels, spec.height, spec.width};

    double bg[3] = {0.05 + 0.9 * u01(rng), 0.05 + 0.9 * u01(rng), 0.05 + 0.9 * u01(rng)};
    for (int ch = 0; ch < spec.channels; ++ch)
        for (int y = 0; y < spec.height; ++y)
            for (int x = 0; x < spec.width; ++x) v.at(ch, y, x) = bg[std::min(ch, 2)];

    const int rects = 3;
    for (int rIdx = 0; rIdx < rects; ++rIdx) {
        double color[3] = {u01(rng), u01(rng), u01(rng)};
        const int rw = 1 + static_cast<int>(u01(rng) * spec.width / 2);
        const int rh = 1 + static_cast<int>(u01(rng) * spec.height / 2);
        const int x0 = static_cast<int>(u01(rng) * (spec.width - 1));
        const int y0 = static_cast<int>(u01(rng) * (spec.height - 1));
        fill_rect(v, x0, y0, rw, rh, color);
    }
    double color[3] = {u01(rng), u01(rng), u01(rng)};
    const double cx = u01(rng) * spec.width;
    const double cy = u01(rng) * spec.height;
    const double r = (0.08 + 0.17 * u01(rng)) * spec.width;
    fill_disc(v, cx, cy, r, color);
    return img;
}

// Sample = prototype + per-channel shift, integer translation (edge clamp)
// and additive noise, all scaled by the jitter level.
Tensor jittered_sample(const DatasetSpec& spec, const Tensor& proto, int id, int sample) {
    std::mt19937_64 rng(mix_seed(spec.seed, static_cast<std::uint64_t>(id) + 0x77,
                                 static_cast<std::uint64_t>(sample)));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const double hue = 0.06 * spec.jitter;
    double shift[3] = {hue * (2.0 * u01(rng) - 1.0), hue * (2.0 * u01(rng) - 1.0),
                       hue * (2.0 * u01(rng) - 1.0)};
    const int max_t = static_cast<int>(std::lround(2.0 * spec.jitter));
    const int dx = max_t == 0 ? 0 : static_cast<int>(std::lround((2.0 * u01(rng) - 1.0) * max_t));
    const int dy = max_t == 0 ? 0 : static_cast<int>(std::lround((2.0 * u01(rng) - 1.0) * max_t));
    const double noise = 0.02 * spec.jitter;

    Tensor out = Tensor::zeros(proto.shape());
    const int c = spec.channels, h = spec.height, w = spec.width;
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int sy = std::clamp(y + dy, 0, h - 1);
                const int sx = std::clamp(x + dx, 0, w - 1);
                double val = proto.data()[(static_cast<std::size_t>(ch) * h + sy) * w + sx];
                val += shift[std::min(ch, 2)];
                if (noise > 0.0) val += noise * gauss(rng);
                out.data()[(static_cast<std::size_t>(ch) * h + y) * w + x] =
                    std::clamp(val, 0.0, 1.0);
            }
    return out;
}

}  // namespace

void DatasetSpec::validate() const {
    if (num_identities < 2 || images_per_identity < 2) {
        throw ConfigError("dataset needs at least 2 identities with 2 images each");
    }
    if (channels < 1 || height < 1 || width < 1) throw ConfigError("bad dataset image shape");
    if (jitter < 0.0) throw ConfigError("dataset jitter must be non-negative");
    const double sum = train_frac + query_frac + gallery_frac;
    if (std::fabs(sum - 1.0) > 1e-9) {
        throw ConfigError("dataset split fractions must sum to 1, got " + std::to_string(sum));
    }
    if (train_frac <= 0.0 || query_frac <= 0.0 || gallery_frac <= 0.0) {
        throw ConfigError("dataset split fractions must all be positive");
    }
}

int Dataset::class_of(int global_identity) const {
    for (std::size_t i = 0; i < train_ids.size(); ++i) {
        if (train_ids[i] == global_identity) return static_cast<int>(i);
    }
    return -1;
}

std::vector<int> Dataset::indices_of(Split s) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (split[i] == s) out.push_back(static_cast<int>(i));
    }
    return out;
}

Dataset generate(const DatasetSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.spec = spec;
    const int n_train_ids =
        std::max(1, static_cast<int>(std::lround(spec.num_identities * spec.train_frac)));
    if (n_train_ids >= spec.num_identities) {
        throw ConfigError("dataset split leaves no evaluation identities");
    }
    const double eval_frac = spec.query_frac + spec.gallery_frac;
    const int query_per_id = std::max(
        1, static_cast<int>(std::lround(spec.images_per_identity * spec.query_frac / eval_frac)));
    if (query_per_id >= spec.images_per_identity) {
        throw ConfigError("dataset split leaves no gallery images");
    }

    for (int id = 0; id < spec.num_identities; ++id) {
        const Tensor proto = identity_prototype(spec, id);
        const bool is_train = id < n_train_ids;
        if (is_train) ds.train_ids.push_back(id);
        for (int s = 0; s < spec.images_per_identity; ++s) {
            ds.images.push_back(jittered_sample(spec, proto, id, s));
            ds.identity.push_back(id);
            if (is_train) {
                ds.split.push_back(Split::train);
            } else {
                ds.split.push_back(s < query_per_id ? Split::query : Split::gallery);
            }
        }
    }
    return ds;
}

Tensor normalize_image(const Tensor& image) {
    const std::size_t n = image.size();
    double mean = 0.0;
    for (double v : image.data()) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : image.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + 1e-8);
    Tensor out = Tensor::zeros(image.shape());
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = (image.data()[i] - mean) * inv;
    return out;
}

Tensor augment(const Tensor& image, const AugmentOps& ops, std::mt19937_64& rng) {
    if (image.ndim() != 3) throw ShapeError("augment expects [C,H,W], got " + shape_str(image.shape()));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    Tensor img = ops.normalize ? normalize_image(image) : image.clone();
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);

    if (ops.crop_pad > 0) {
        const int pad = ops.crop_pad;
        const int oy = static_cast<int>(u01(rng) * (2 * pad + 1));
        const int ox = static_cast<int>(u01(rng) * (2 * pad + 1));
        Tensor cropped = Tensor::zeros(img.shape());
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const int sy = y + oy - pad;
                    const int sx = x + ox - pad;
                    double v = 0.0;
                    if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
                        v = img.data()[(static_cast<std::size_t>(ch) * h + sy) * w + sx];
                    }
                    cropped.data()[(static_cast<std::size_t>(ch) * h + y) * w + x] = v;
                }
        img = cropped;
    }

    if (ops.erase_max_frac > 0.0 && u01(rng) < ops.erase_prob) {
        const double frac = ops.erase_min_frac + (ops.erase_max_frac - ops.erase_min_frac) * u01(rng);
        const double area = frac * h * w;
        const double aspect = 0.3 + 2.7 * u01(rng);
        int eh = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, h);
        int ew = std::clamp(static_cast<int>(std::lround(std::sqrt(area / aspect))), 1, w);
        const int y0 = static_cast<int>(u01(rng) * (h - eh + 1));
        const int x0 = static_cast<int>(u01(rng) * (w - ew + 1));
        for (int ch = 0; ch < c; ++ch)
            for (int y = y0; y < y0 + eh; ++y)
                for (int x = x0; x < x0 + ew; ++x)
                    img.data()[(static_cast<std::size_t>(ch) * h + y) * w + x] = 0.0;
    }

    if (ops.flip_prob > 0.0 && u01(rng) < ops.flip_prob) {
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w / 2; ++x) {
                    std::swap(img.data()[(static_cast<std::size_t>(ch) * h + y) * w + x],
                              img.data()[(static_cast<std::size_t>(ch) * h + y) * w + (w - 1 - x)]);
                }
    }
    return img;
}

PkBatcher::PkBatcher(const Dataset& ds, int p, int s, std::uint64_t seed)
    : ds_(&ds), p_(p), s_(s), seed_(seed) {
    if (p < 2 || s < 2) throw ConfigError("pk batches need P >= 2 and S >= 2");
    train_identities_ = ds.train_ids;
    if (static_cast<int>(train_identities_.size()) < p) {
        throw ConfigError("pk batches need at least P train identities, have " +
                          std::to_string(train_identities_.size()));
    }
    images_by_identity_.resize(train_identities_.size());
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        if (ds.split[i] != Split::train) continue;
        const int cls = ds.class_of(ds.identity[i]);
        images_by_identity_[static_cast<std::size_t>(cls)].push_back(static_cast<int>(i));
    }
    std::size_t total = 0;
    for (const auto& imgs : images_by_identity_) {
        if (static_cast<int>(imgs.size()) < s) {
            throw ConfigError("pk batches need at least S images per train identity");
        }
        total += imgs.size();
    }
    const int cover = static_cast<int>((train_identities_.size() + p - 1) / static_cast<std::size_t>(p));
    const int by_size = static_cast<int>(total / (static_cast<std::size_t>(p) * s));
    batches_per_epoch_ = std::max(1, std::max(cover, by_size));
}

std::vector<std::vector<int>> PkBatcher::epoch_indices(int epoch) const {
    std::mt19937_64 rng(mix_seed(seed_, 0xBA7C, static_cast<std::uint64_t>(epoch)));
    const int n_ids = static_cast<int>(train_identities_.size());

    // identity stream: concatenated shuffles, duplicates within one batch
    // chunk fixed up by swapping forward
    std::vector<int> stream;
    while (static_cast<int>(stream.size()) < batches_per_epoch_ * p_) {
        std::vector<int> perm(static_cast<std::size_t>(n_ids));
        for (int i = 0; i < n_ids; ++i) perm[static_cast<std::size_t>(i)] = i;
        std::shuffle(perm.begin(), perm.end(), rng);
        stream.insert(stream.end(), perm.begin(), perm.end());
    }
    for (int b = 0; b < batches_per_epoch_; ++b) {
        for (int j = 0; j < p_; ++j) {
            const std::size_t pos = static_cast<std::size_t>(b) * p_ + j;
            bool dup = true;
            std::size_t probe = pos;
            while (dup) {
                dup = false;
                for (int k = 0; k < j; ++k) {
                    if (stream[static_cast<std::size_t>(b) * p_ + k] == stream[probe]) {
                        dup = true;
                        ++probe;
                        if (probe >= stream.size()) {
                            std::vector<int> perm(static_cast<std::size_t>(n_ids));
                            for (int i = 0; i < n_ids; ++i) perm[static_cast<std::size_t>(i)] = i;
                            std::shuffle(perm.begin(), perm.end(), rng);
                            stream.insert(stream.end(), perm.begin(), perm.end());
                        }
                        break;
                    }
                }
            }
            if (probe != pos) std::swap(stream[pos], stream[probe]);
        }
    }

    // per-identity cyclic sample cursors over a per-epoch shuffle
    std::vector<std::vector<int>> order(images_by_identity_.size());
    std::vector<std::size_t> cursor(images_by_identity_.size(), 0);
    for (std::size_t i = 0; i < images_by_identity_.size(); ++i) {
        order[i] = images_by_identity_[i];
        std::shuffle(order[i].begin(), order[i].end(), rng);
    }

    std::vector<std::vector<int>> batches;
    for (int b = 0; b < batches_per_epoch_; ++b) {
        std::vector<int> batch;
        batch.reserve(static_cast<std::size_t>(p_) * s_);
        for (int j = 0; j < p_; ++j) {
            const int cls = stream[static_cast<std::size_t>(b) * p_ + j];
            auto& ord = order[static_cast<std::size_t>(cls)];
            auto& cur = cursor[static_cast<std::size_t>(cls)];
            for (int k = 0; k < s_; ++k) {
                batch.push_back(ord[cur % ord.size()]);
                ++cur;
            }
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

}  // namespace cdd
