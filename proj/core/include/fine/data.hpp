#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fine/tensor.hpp"

namespace fine {

// Procedural image sets; pixels in [-1, 1], images [n x c x h x h].
struct DeskDataset {
    std::string name;
    std::uint64_t seed = 0;
    std::size_t num_classes = 0;
    Tensor images;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t channels() const { return images.dim(1); }
    std::size_t side() const { return images.dim(2); }
};

// "shapes-A" (circles / squares), "shapes-B" (crosses / triangles) or
// "gauss-mix" (two blurred blobs, horizontal / vertical pairing). Sample i
// depends only on (name, seed, i). Requires side in {8, 16} and n >= 256.
DeskDataset make_dataset(std::string_view name, std::size_t n, std::size_t side, std::uint64_t seed);

bool is_known_dataset(std::string_view name);

Tensor gather_images(const DeskDataset& ds, std::span<const std::size_t> indices);
DeskDataset subset(const DeskDataset& ds, std::span<const std::size_t> indices);

// Seeded permutation of [0, n).
std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed);

struct Batch {
    Tensor images;
    std::vector<int> labels;
    std::vector<std::size_t> indices;
};

// Infinite stream of batches over epoch-wise seeded shuffles. Holds a
// reference: the dataset must outlive the stream.
class BatchStream {
public:
    BatchStream(const DeskDataset& ds, std::size_t batch, std::uint64_t seed);

    Batch next();
    std::size_t epoch() const { return epoch_; }

private:
    void reshuffle();

    const DeskDataset* ds_;
    std::size_t batch_;
    std::uint64_t seed_;
    std::size_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::vector<std::size_t> order_;
};

// Raw image block: magic "IMGR", u32 n, c, h (little-endian), then n*c*h*h u8
// pixels. Pixels map linearly between [0, 255] and [-1, 1].
void write_imgr(const std::filesystem::path& path, const Tensor& images);
Tensor read_imgr(const std::filesystem::path& path);

// Concatenates every *.imgr file in a directory (sorted by name). Labels are 0.
DeskDataset load_image_dir(const std::filesystem::path& dir);

}  // namespace fine
