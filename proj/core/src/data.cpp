#include "fine/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>

#include "fine/errors.hpp"
#include "fine/io_util.hpp"
#include "fine/rng.hpp"

namespace fine {

namespace {

constexpr int kSuperSample = 4;

std::uint64_t name_tag(std::string_view name) {
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    return h;
}

// Renders a coverage mask by supersampling an inside() predicate over the
// unit square, then maps coverage to [-1, 1].
void render(std::span<double> pixels, std::size_t side, const std::function<bool(double, double)>& inside) {
    const double step = 1.0 / static_cast<double>(side * kSuperSample);
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            int hits = 0;
            for (int sy = 0; sy < kSuperSample; ++sy) {
                for (int sx = 0; sx < kSuperSample; ++sx) {
                    const double px = (static_cast<double>(x * kSuperSample + sx) + 0.5) * step;
                    const double py = (static_cast<double>(y * kSuperSample + sy) + 0.5) * step;
                    if (inside(px, py)) ++hits;
                }
            }
            const double coverage = static_cast<double>(hits) / (kSuperSample * kSuperSample);
            pixels[y * side + x] = -1.0 + 2.0 * coverage;
        }
    }
}

void render_shapes_a(std::span<double> px, std::size_t side, int label, Rng& rng) {
    const double size = 0.18 + 0.14 * rng.uniform();
    const double cx = size + (1.0 - 2.0 * size) * rng.uniform();
    const double cy = size + (1.0 - 2.0 * size) * rng.uniform();
    if (label == 0) {
        render(px, side, [=](double x, double y) { return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= size * size; });
    } else {
        const double half = size * 0.85;
        render(px, side, [=](double x, double y) { return std::abs(x - cx) <= half && std::abs(y - cy) <= half; });
    }
}

void render_shapes_b(std::span<double> px, std::size_t side, int label, Rng& rng) {
    const double size = 0.2 + 0.14 * rng.uniform();
    const double cx = size + (1.0 - 2.0 * size) * rng.uniform();
    const double cy = size + (1.0 - 2.0 * size) * rng.uniform();
    if (label == 0) {
        const double arm = size * (0.3 + 0.1 * rng.uniform());
        render(px, side, [=](double x, double y) {
            const double dx = std::abs(x - cx), dy = std::abs(y - cy);
            return (dx <= arm && dy <= size) || (dy <= arm && dx <= size);
        });
    } else {
        // Upward triangle with apex at (cx, cy - size), base at y = cy + size.
        render(px, side, [=](double x, double y) {
            if (y < cy - size || y > cy + size) return false;
            const double frac = (y - (cy - size)) / (2.0 * size);
            return std::abs(x - cx) <= frac * size;
        });
    }
}

void render_gauss_mix(std::span<double> px, std::size_t side, int label, Rng& rng) {
    const double spread = 0.08 + 0.06 * rng.uniform();
    const double along = 0.25 + 0.5 * rng.uniform();
    const double gap = 0.18 + 0.12 * rng.uniform();
    const double across = 0.3 + 0.4 * rng.uniform();
    std::array<std::array<double, 2>, 2> centers{};
    if (label == 0) {
        centers = {{{along - gap, across}, {along + gap, across}}};
    } else {
        centers = {{{across, along - gap}, {across, along + gap}}};
    }
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(side);
            const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(side);
            double intensity = 0.0;
            for (const auto& c : centers) {
                const double d2 = (fx - c[0]) * (fx - c[0]) + (fy - c[1]) * (fy - c[1]);
                intensity += std::exp(-d2 / (2.0 * spread * spread));
            }
            px[y * side + x] = -1.0 + 2.0 * std::min(1.0, intensity);
        }
    }
}

}  // namespace

bool is_known_dataset(std::string_view name) {
    return name == "shapes-A" || name == "shapes-B" || name == "gauss-mix";
}

DeskDataset make_dataset(std::string_view name, std::size_t n, std::size_t side, std::uint64_t seed) {
    if (!is_known_dataset(name)) {
        throw ConfigError("unknown dataset '" + std::string(name) + "' (expected shapes-A, shapes-B or gauss-mix)");
    }
    if (side != 8 && side != 16) throw ConfigError("unsupported image side " + std::to_string(side) + " (8 or 16)");
    if (n < 256) throw ConfigError("dataset needs at least 256 samples, got " + std::to_string(n));

    DeskDataset ds;
    ds.name = std::string(name);
    ds.seed = seed;
    ds.num_classes = 2;
    ds.images = Tensor({n, 1, side, side});
    ds.labels.resize(n);
    const Rng base = Rng(seed).split(name_tag(name));
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = base.split(i);
        const int label = static_cast<int>(i % 2);
        ds.labels[i] = label;
        std::span<double> px = ds.images.data().subspan(i * side * side, side * side);
        if (name == "shapes-A") {
            render_shapes_a(px, side, label, rng);
        } else if (name == "shapes-B") {
            render_shapes_b(px, side, label, rng);
        } else {
            render_gauss_mix(px, side, label, rng);
        }
    }
    return ds;
}

Tensor gather_images(const DeskDataset& ds, std::span<const std::size_t> indices) {
    const std::size_t per = ds.images.numel() / ds.size();
    Tensor out({indices.size(), ds.channels(), ds.side(), ds.side()});
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (indices[k] >= ds.size()) throw IndexError("sample index " + std::to_string(indices[k]) + " out of range");
        std::copy_n(ds.images.data().begin() + static_cast<std::ptrdiff_t>(indices[k] * per), per,
                    out.data().begin() + static_cast<std::ptrdiff_t>(k * per));
    }
    return out;
}

DeskDataset subset(const DeskDataset& ds, std::span<const std::size_t> indices) {
    if (indices.empty()) throw ContractError("subset needs at least one index");
    DeskDataset out;
    out.name = ds.name;
    out.seed = ds.seed;
    out.num_classes = ds.num_classes;
    out.images = gather_images(ds, indices);
    for (std::size_t i : indices) out.labels.push_back(ds.labels[i]);
    return out;
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

BatchStream::BatchStream(const DeskDataset& ds, std::size_t batch, std::uint64_t seed)
    : ds_(&ds), batch_(batch), seed_(seed) {
    if (batch == 0 || batch > ds.size()) {
        throw ContractError("batch size " + std::to_string(batch) + " must lie in [1, " + std::to_string(ds.size()) +
                            "]");
    }
    reshuffle();
}

void BatchStream::reshuffle() {
    order_ = permutation(ds_->size(), mix64(seed_ ^ mix64(epoch_ + 0x5151)));
    cursor_ = 0;
}

Batch BatchStream::next() {
    Batch b;
    b.indices.reserve(batch_);
    while (b.indices.size() < batch_) {
        if (cursor_ == order_.size()) {
            ++epoch_;
            reshuffle();
        }
        b.indices.push_back(order_[cursor_++]);
    }
    b.images = gather_images(*ds_, b.indices);
    for (std::size_t i : b.indices) b.labels.push_back(ds_->labels[i]);
    return b;
}

void write_imgr(const std::filesystem::path& path, const Tensor& images) {
    if (images.rank() != 4 || images.dim(2) != images.dim(3)) {
        throw DimensionError("write_imgr: expected [n x c x h x h], got " + shape_str(images.shape()));
    }
    std::string bytes = "IMGR";
    for (std::size_t axis = 0; axis < 3; ++axis) append_u32(bytes, static_cast<std::uint32_t>(images.dim(axis)));
    for (double v : images.data()) {
        const double scaled = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
        bytes.push_back(static_cast<char>(static_cast<unsigned char>(scaled)));
    }
    write_file_atomic(path, bytes);
}

Tensor read_imgr(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 16 || bytes.compare(0, 4, "IMGR") != 0) {
        throw FormatError(path.string() + ": not an IMGR image file (bad magic)");
    }
    const std::size_t n = read_u32(bytes, 4), c = read_u32(bytes, 8), h = read_u32(bytes, 12);
    if (n == 0 || c == 0 || h == 0 || bytes.size() != 16 + n * c * h * h) {
        throw FormatError(path.string() + ": IMGR header (n=" + std::to_string(n) + ", c=" + std::to_string(c) +
                          ", h=" + std::to_string(h) + ") does not match file size " + std::to_string(bytes.size()));
    }
    Tensor out({n, c, h, h});
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = static_cast<double>(static_cast<unsigned char>(bytes[16 + i])) / 127.5 - 1.0;
    }
    return out;
}

DeskDataset load_image_dir(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    std::error_code ec;
    for (const auto& entry : std::filesystem::directory_iterator(dir, ec)) {
        if (entry.is_regular_file() && entry.path().extension() == ".imgr") files.push_back(entry.path());
    }
    if (ec) throw FormatError("cannot list image directory " + dir.string() + ": " + ec.message());
    if (files.empty()) throw FormatError("no .imgr files in " + dir.string());
    std::sort(files.begin(), files.end());
    std::vector<double> pixels;
    Shape item;
    for (const auto& f : files) {
        const Tensor block = read_imgr(f);
        const Shape this_item = {block.dim(1), block.dim(2), block.dim(3)};
        if (item.empty()) item = this_item;
        if (this_item != item) {
            throw FormatError(f.string() + ": image shape " + shape_str(this_item) + " differs from " + shape_str(item));
        }
        pixels.insert(pixels.end(), block.data().begin(), block.data().end());
    }
    DeskDataset ds;
    ds.name = dir.filename().string();
    ds.num_classes = 1;
    const std::size_t n = pixels.size() / shape_numel(item);
    ds.images = Tensor({n, item[0], item[1], item[2]}, std::move(pixels));
    ds.labels.assign(n, 0);
    return ds;
}

}  // namespace fine
