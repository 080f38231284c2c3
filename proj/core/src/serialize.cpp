#include "fine/serialize.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <fstream>
#include <sstream>

#include "fine/errors.hpp"
#include "fine/io_util.hpp"

namespace fine {

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

std::size_t parse_size(std::string_view text, const std::string& what) {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw FormatError("malformed " + what + ": '" + std::string(text) + "'");
    }
    return v;
}

struct IndexEntry {
    std::string name;
    Shape shape;
    std::size_t offset = 0;
    std::size_t length = 0;
};

IndexEntry parse_index_line(const std::string& value, const std::string& source) {
    std::istringstream in(value);
    IndexEntry e;
    std::string dtype, dims, offset, length;
    if (!(in >> e.name >> dtype >> dims >> offset >> length)) {
        throw FormatError(source + ": malformed tensor index entry '" + value + "'");
    }
    if (dtype != "f64") throw FormatError(source + ": tensor '" + e.name + "' has unsupported dtype " + dtype);
    std::size_t start = 0;
    while (start <= dims.size()) {
        const std::size_t comma = dims.find(',', start);
        const std::size_t end = comma == std::string::npos ? dims.size() : comma;
        e.shape.push_back(parse_size(std::string_view(dims).substr(start, end - start), "tensor shape"));
        if (e.shape.back() == 0) throw FormatError(source + ": tensor '" + e.name + "' has a zero extent");
        start = end + 1;
        if (comma == std::string::npos) break;
    }
    e.offset = parse_size(offset, "tensor offset");
    e.length = parse_size(length, "tensor length");
    return e;
}

}  // namespace

std::optional<std::string> Container::get(std::string_view key) const {
    for (const auto& [k, v] : meta) {
        if (k == key) return v;
    }
    return std::nullopt;
}

const std::string& Container::require(std::string_view key) const {
    for (const auto& [k, v] : meta) {
        if (k == key) return v;
    }
    throw FormatError("missing header key '" + std::string(key) + "'");
}

const Tensor* Container::find_tensor(std::string_view name) const {
    for (const NamedTensor& t : tensors) {
        if (t.name == name) return &t.tensor;
    }
    return nullptr;
}

std::string encode_container(const Container& c) {
    if (c.magic.size() != 4) throw ContractError("container magic must be 4 bytes");
    std::string header;
    for (const auto& [k, v] : c.meta) {
        if (k == "tensor" || k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
            throw ContractError("invalid header entry '" + k + "'");
        }
        header += k + " = " + v + "\n";
    }
    std::string payload;
    for (const NamedTensor& t : c.tensors) {
        if (t.name.find_first_of(" \t\n") != std::string::npos) {
            throw ContractError("tensor name '" + t.name + "' contains whitespace");
        }
        std::string dims;
        for (std::size_t i = 0; i < t.tensor.rank(); ++i) {
            if (i) dims += ',';
            dims += std::to_string(t.tensor.shape()[i]);
        }
        const std::size_t length = t.tensor.numel() * sizeof(double);
        header += "tensor = " + t.name + " f64 " + dims + " " + std::to_string(payload.size()) + " " +
                  std::to_string(length) + "\n";
        for (double v : t.tensor.data()) append_u64(payload, std::bit_cast<std::uint64_t>(v));
    }
    std::string out = c.magic;
    append_u32(out, c.version);
    append_u64(out, header.size());
    out += header;
    out += payload;
    append_u32(out, crc32_of(payload));
    return out;
}

Container decode_container(std::string_view bytes, std::string_view expected_magic, const std::string& source) {
    if (bytes.size() < 4 || bytes.substr(0, 4) != expected_magic) {
        const std::string found = bytes.size() >= 4 ? std::string(bytes.substr(0, 4)) : std::string("<truncated>");
        throw FormatError(source + ": bad magic '" + found + "', expected '" + std::string(expected_magic) + "'");
    }
    Container c;
    c.magic = std::string(expected_magic);
    c.version = read_u32(bytes, 4);
    if (c.version > kFormatVersion) {
        throw VersionError(source + ": format version " + std::to_string(c.version) + " is newer than this reader (" +
                           std::to_string(kFormatVersion) + ")");
    }
    const std::uint64_t header_len = read_u64(bytes, 8);
    const std::size_t header_start = 16;
    if (header_len > bytes.size() || header_start + header_len + 4 > bytes.size()) {
        throw FormatError(source + ": header length " + std::to_string(header_len) + " exceeds file size");
    }
    const std::string_view header = bytes.substr(header_start, header_len);
    const std::size_t payload_start = header_start + header_len;
    const std::size_t payload_len = bytes.size() - payload_start - 4;
    const std::string_view payload = bytes.substr(payload_start, payload_len);
    const std::uint32_t stored_crc = read_u32(bytes, bytes.size() - 4);
    if (crc32_of(payload) != stored_crc) {
        throw CorruptionError(source + ": payload CRC mismatch (file is corrupted)");
    }

    std::vector<IndexEntry> index;
    std::size_t line_start = 0;
    while (line_start < header.size()) {
        std::size_t line_end = header.find('\n', line_start);
        if (line_end == std::string_view::npos) line_end = header.size();
        const std::string_view line = header.substr(line_start, line_end - line_start);
        line_start = line_end + 1;
        if (trim(line).empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string_view::npos) throw FormatError(source + ": malformed header line '" + std::string(line) + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "tensor") {
            index.push_back(parse_index_line(value, source));
        } else {
            c.meta.emplace_back(key, value);
        }
    }

    std::size_t cursor = 0;
    for (const IndexEntry& e : index) {
        if (e.offset < cursor) throw FormatError(source + ": tensor '" + e.name + "' overlaps its predecessor");
        if (e.length != shape_numel(e.shape) * sizeof(double)) {
            throw FormatError(source + ": tensor '" + e.name + "' length " + std::to_string(e.length) +
                              " does not match shape " + shape_str(e.shape));
        }
        if (e.offset + e.length > payload.size()) {
            throw FormatError(source + ": tensor '" + e.name + "' extends past the payload");
        }
        std::vector<double> values(shape_numel(e.shape));
        for (std::size_t i = 0; i < values.size(); ++i) {
            values[i] = std::bit_cast<double>(read_u64(payload, e.offset + i * sizeof(double)));
        }
        c.tensors.push_back({e.name, Tensor(e.shape, std::move(values))});
        cursor = e.offset + e.length;
    }
    return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
    write_file_atomic(path, encode_container(c));
}

Container read_container(const std::filesystem::path& path, std::string_view expected_magic) {
    return decode_container(read_file(path), expected_magic, path.string());
}

std::string peek_magic(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string() + " for reading");
    char magic[4] = {};
    if (!in.read(magic, 4)) return "";
    return std::string(magic, 4);
}

MetaList config_meta(const DiTConfig& config) {
    return {
        {"config.image_size", std::to_string(config.image_size)},
        {"config.channels", std::to_string(config.channels)},
        {"config.patch", std::to_string(config.patch)},
        {"config.width", std::to_string(config.width)},
        {"config.hidden", std::to_string(config.hidden)},
        {"config.heads", std::to_string(config.heads)},
        {"config.depth", std::to_string(config.depth)},
        {"config.num_classes", std::to_string(config.num_classes)},
        {"config.time_features", std::to_string(config.time_features)},
        {"config.diffusion_steps", std::to_string(config.diffusion_steps)},
        {"config.backing", std::string(backing_name(config.backing))},
        {"config.rank", std::to_string(config.rank)},
        {"config.group", std::to_string(config.group)},
    };
}

DiTConfig config_from_meta(const Container& c) {
    auto size = [&](const char* key) { return parse_size(c.require(key), key); };
    DiTConfig config;
    config.image_size = size("config.image_size");
    config.channels = size("config.channels");
    config.patch = size("config.patch");
    config.width = size("config.width");
    config.hidden = size("config.hidden");
    config.heads = size("config.heads");
    config.depth = size("config.depth");
    config.num_classes = size("config.num_classes");
    config.time_features = size("config.time_features");
    config.diffusion_steps = size("config.diffusion_steps");
    config.backing = backing_from_name(c.require("config.backing"));
    config.rank = size("config.rank");
    config.group = size("config.group");
    return config;
}

void save_checkpoint(const std::filesystem::path& path, const DiTModel& model, const EmaModel* ema,
                     std::uint64_t seed, std::size_t step, const MetaList& info) {
    Container c;
    c.magic = std::string(kCheckpointMagic);
    c.meta = config_meta(model.config());
    c.meta.emplace_back("seed", std::to_string(seed));
    c.meta.emplace_back("step", std::to_string(step));
    if (model.transferred_params) c.meta.emplace_back("transferred", std::to_string(*model.transferred_params));
    if (ema) {
        std::ostringstream decay;
        decay.precision(17);
        decay << ema->decay();
        c.meta.emplace_back("ema.decay", decay.str());
    }
    for (const auto& [k, v] : info) c.meta.emplace_back("info." + k, v);
    c.tensors = model.parameters();
    if (ema) {
        for (const NamedTensor& s : ema->shadow()) c.tensors.push_back({"ema/" + s.name, s.tensor});
    }
    write_container(path, c);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const Container c = read_container(path, kCheckpointMagic);
    const std::string source = path.string();
    DiTConfig config;
    try {
        config = config_from_meta(c);
        config.validate();
    } catch (const ConfigError& e) {
        throw FormatError(source + ": " + e.what());
    }
    Checkpoint ckpt{DiTModel(config), std::nullopt, 0, 0, {}};
    auto fill = [&](const std::vector<NamedTensor>& targets, const std::string& prefix) {
        for (const NamedTensor& p : targets) {
            const Tensor* stored = c.find_tensor(prefix + p.name);
            if (stored == nullptr) throw FormatError(source + ": checkpoint is missing tensor '" + prefix + p.name + "'");
            if (stored->shape() != p.tensor.shape()) {
                throw FormatError(source + ": tensor '" + prefix + p.name + "' has shape " +
                                  shape_str(stored->shape()) + ", expected " + shape_str(p.tensor.shape()));
            }
            std::copy(stored->data().begin(), stored->data().end(), p.tensor.impl()->data.begin());
        }
    };
    const auto params = ckpt.model.parameters();
    fill(params, "");
    if (const auto decay = c.get("ema.decay")) {
        EmaModel ema(params, std::stod(*decay));
        fill(ema.shadow(), "ema/");
        ckpt.ema = std::move(ema);
    }
    if (const auto t = c.get("transferred")) ckpt.model.transferred_params = parse_size(*t, "transferred count");
    ckpt.seed = parse_size(c.require("seed"), "seed");
    ckpt.step = parse_size(c.require("step"), "step");
    for (const auto& [k, v] : c.meta) {
        if (k.rfind("info.", 0) == 0) ckpt.info.emplace_back(k.substr(5), v);
    }
    return ckpt;
}

void save_learngene(const std::filesystem::path& path, const Learngene& learngene) {
    Container c;
    c.magic = std::string(kLearngeneMagic);
    c.version = learngene.meta.format_version;
    const LearngeneMeta& m = learngene.meta;
    c.meta = {
        {"width", std::to_string(m.width)},
        {"hidden", std::to_string(m.hidden)},
        {"rank", std::to_string(m.rank)},
        {"group", std::to_string(m.group)},
        {"condensation_steps", std::to_string(m.condensation_steps)},
        {"seed", std::to_string(m.seed)},
    };
    c.tensors = learngene.named_tensors();
    write_container(path, c);
}

Learngene learngene_from_container(const Container& c, const std::string& source) {
    Learngene lg;
    auto size = [&](const char* key) {
        const auto v = c.get(key);
        if (!v) throw FormatError(source + ": learngene header is missing '" + key + "'");
        return parse_size(*v, key);
    };
    lg.meta.width = size("width");
    lg.meta.hidden = size("hidden");
    lg.meta.rank = size("rank");
    lg.meta.group = size("group");
    lg.meta.condensation_steps = size("condensation_steps");
    lg.meta.seed = size("seed");
    lg.meta.format_version = c.version;

    std::vector<std::string> expected;
    for (FamilyKind kind : kFamilyKinds) {
        const std::string suffix(family_name(kind));
        const FamilyShape shape = family_shape(kind, lg.meta.width, lg.meta.hidden);
        for (const char* factor : {"U_", "V_"}) {
            const std::string name = factor + suffix;
            expected.push_back(name);
            const Tensor* t = c.find_tensor(name);
            if (t == nullptr) throw FormatError(source + ": learngene is missing tensor " + name);
            const Shape want = {factor[0] == 'U' ? shape.rows : shape.cols, lg.meta.rank};
            if (t->shape() != want) {
                throw FormatError(source + ": learngene tensor " + name + " has shape " + shape_str(t->shape()) +
                                  ", expected " + shape_str(want));
            }
            (factor[0] == 'U' ? lg.U : lg.V)[static_cast<std::size_t>(kind)] = *t;
        }
    }
    for (const NamedTensor& t : c.tensors) {
        if (std::find(expected.begin(), expected.end(), t.name) == expected.end()) {
            throw FormatError(source + ": unexpected tensor '" + t.name + "' in learngene (only U/V factors allowed)");
        }
    }
    return lg;
}

Learngene load_learngene(const std::filesystem::path& path) {
    return learngene_from_container(read_container(path, kLearngeneMagic), path.string());
}

}  // namespace fine
