#include "config.hpp"

#include <cmath>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include "toml.hpp"

#include "fine/errors.hpp"
#include "fine/io_util.hpp"

namespace fine::cli {

namespace {

class TableReader {
public:
    TableReader(const toml::table& table, std::string name, const std::string& source)
        : table_(table), name_(std::move(name)), source_(source) {}

    void size(const char* key, std::size_t& out) {
        if (const toml::node* n = take(key)) {
            const auto v = n->value<std::int64_t>();
            if (!n->is_integer() || !v || *v < 0) fail(key, "a non-negative integer");
            out = static_cast<std::size_t>(*v);
        }
    }

    void u64(const char* key, std::uint64_t& out) {
        if (const toml::node* n = take(key)) {
            const auto v = n->value<std::int64_t>();
            if (!n->is_integer() || !v || *v < 0) fail(key, "a non-negative integer");
            out = static_cast<std::uint64_t>(*v);
        }
    }

    void real(const char* key, double& out) {
        if (const toml::node* n = take(key)) {
            if (!n->is_number()) fail(key, "a number");
            out = *n->value<double>();
        }
    }

    void real(const char* key, std::optional<double>& out) {
        double v = 0.0;
        if (table_.contains(key)) {
            real(key, v);
            out = v;
        }
    }

    void text(const char* key, std::string& out) {
        if (const toml::node* n = take(key)) {
            if (!n->is_string()) fail(key, "a string");
            out = *n->value<std::string>();
        }
    }

    template <typename T>
    void list(const char* key, std::vector<T>& out) {
        const toml::node* n = take(key);
        if (!n) return;
        const toml::array* arr = n->as_array();
        if (!arr) fail(key, "an array");
        out.clear();
        for (const toml::node& item : *arr) {
            if constexpr (std::is_same_v<T, std::string>) {
                if (!item.is_string()) fail(key, "an array of strings");
                out.push_back(*item.value<std::string>());
            } else {
                const auto v = item.value<std::int64_t>();
                if (!item.is_integer() || !v || *v < 0) fail(key, "an array of non-negative integers");
                out.push_back(static_cast<T>(*v));
            }
        }
    }

    // Anything not consumed is a typo or a key from a newer tool.
    void finish() const {
        for (const auto& [key, node] : table_) {
            if (std::find(seen_.begin(), seen_.end(), std::string(key.str())) == seen_.end()) {
                throw ConfigError(source_ + ": unknown key '" + std::string(key.str()) + "' in [" + name_ + "]");
            }
        }
    }

private:
    const toml::node* take(const char* key) {
        seen_.emplace_back(key);
        return table_.get(key);
    }

    [[noreturn]] void fail(const char* key, const char* expected) const {
        throw ConfigError(source_ + ": [" + name_ + "] " + key + " must be " + expected);
    }

    const toml::table& table_;
    std::string name_;
    const std::string& source_;
    std::vector<std::string> seen_;
};

void read_model(TableReader& r, DiTConfig& m) {
    r.size("image_size", m.image_size);
    r.size("channels", m.channels);
    r.size("patch", m.patch);
    r.size("width", m.width);
    r.size("hidden", m.hidden);
    r.size("heads", m.heads);
    r.size("depth", m.depth);
    r.size("num_classes", m.num_classes);
    r.size("time_features", m.time_features);
    r.size("diffusion_steps", m.diffusion_steps);
    std::string backing(backing_name(m.backing));
    r.text("backing", backing);
    m.backing = backing_from_name(backing);
    r.size("rank", m.rank);
    r.size("group", m.group);
}

void read_train(TableReader& r, TrainConfig& t) {
    r.size("steps", t.steps);
    r.size("batch", t.batch);
    r.real("lr", t.lr);
    r.real("weight_decay", t.weight_decay);
    r.real("ema_decay", t.ema_decay);
    r.real("class_drop", t.class_drop);
    r.u64("seed", t.seed);
}

void read_fit(TableReader& r, SigmaFitConfig& f) {
    r.size("fit_steps", f.fit_steps);
    r.real("fit_fraction", f.fit_fraction);
    r.size("min_samples", f.min_samples);
    r.real("lr", f.lr);
    r.size("batch", f.batch);
    r.u64("seed", f.seed);
}

void read_data(TableReader& r, DataConfig& d) {
    r.text("name", d.name);
    r.size("n", d.n);
    r.u64("seed", d.seed);
    r.text("dir", d.dir);
}

void read_bench(TableReader& r, BenchConfig& b) {
    r.list("recipes", b.recipes);
    r.list("depths", b.depths);
    r.list("seeds", b.seeds);
    r.size("steps", b.steps);
    r.real("target_loss", b.target_loss);
    r.size("frechet_samples", b.frechet_samples);
    r.u64("projection_seed", b.projection_seed);
    r.size("svd_rank", b.svd_rank);
}

std::string num(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    std::string s = os.str();
    // keep floats recognisable as floats in TOML
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

template <typename T>
std::string int_list(const std::vector<T>& values) {
    std::string out = "[";
    for (std::size_t i = 0; i < values.size(); ++i) out += (i ? ", " : "") + std::to_string(values[i]);
    return out + "]";
}

std::string quoted(const std::string& s) {
    std::ostringstream os;
    os << toml::value<std::string>(s);
    return os.str();
}

}  // namespace

RunConfig parse_config(std::string_view text, const std::string& source) {
    toml::table root;
    try {
        root = toml::parse(text, source);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << source << ":" << e.source().begin.line << ":" << e.source().begin.column << ": " << e.description();
        throw ConfigError(os.str());
    }
    RunConfig config;
    for (const auto& [key, node] : root) {
        const std::string name(key.str());
        const toml::table* table = node.as_table();
        if (!table) throw ConfigError(source + ": top-level key '" + name + "' must be a table");
        TableReader reader(*table, name, source);
        if (name == "model") {
            read_model(reader, config.model);
        } else if (name == "train") {
            read_train(reader, config.train);
        } else if (name == "fit") {
            read_fit(reader, config.fit);
        } else if (name == "data") {
            read_data(reader, config.data);
        } else if (name == "bench") {
            read_bench(reader, config.bench);
        } else if (name == "run") {
            continue;
        } else {
            throw ConfigError(source + ": unknown table [" + name + "]");
        }
        reader.finish();
    }
    config.model.validate();
    return config;
}

RunConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path), path.string()); }

std::string to_toml(const RunConfig& c) {
    std::ostringstream os;
    const DiTConfig& m = c.model;
    os << "[model]\n"
       << "image_size = " << m.image_size << "\nchannels = " << m.channels << "\npatch = " << m.patch
       << "\nwidth = " << m.width << "\nhidden = " << m.hidden << "\nheads = " << m.heads << "\ndepth = " << m.depth
       << "\nnum_classes = " << m.num_classes << "\ntime_features = " << m.time_features
       << "\ndiffusion_steps = " << m.diffusion_steps << "\nbacking = \"" << backing_name(m.backing) << "\""
       << "\nrank = " << m.rank << "\ngroup = " << m.group << "\n\n";
    const TrainConfig& t = c.train;
    os << "[train]\n"
       << "steps = " << t.steps << "\nbatch = " << t.batch << "\nlr = " << num(t.lr)
       << "\nweight_decay = " << num(t.weight_decay) << "\nema_decay = " << num(t.ema_decay)
       << "\nclass_drop = " << num(t.class_drop) << "\nseed = " << t.seed << "\n\n";
    const SigmaFitConfig& f = c.fit;
    os << "[fit]\n"
       << "fit_steps = " << f.fit_steps << "\nfit_fraction = " << num(f.fit_fraction)
       << "\nmin_samples = " << f.min_samples << "\nlr = " << num(f.lr) << "\nbatch = " << f.batch
       << "\nseed = " << f.seed << "\n\n";
    os << "[data]\n"
       << "name = " << quoted(c.data.name) << "\nn = " << c.data.n << "\nseed = " << c.data.seed
       << "\ndir = " << quoted(c.data.dir) << "\n\n";
    const BenchConfig& b = c.bench;
    os << "[bench]\nrecipes = [";
    for (std::size_t i = 0; i < b.recipes.size(); ++i) os << (i ? ", " : "") << quoted(b.recipes[i]);
    os << "]\ndepths = " << int_list(b.depths) << "\nseeds = " << int_list(b.seeds) << "\nsteps = " << b.steps
       << "\n";
    if (b.target_loss) os << "target_loss = " << num(*b.target_loss) << "\n";
    os << "frechet_samples = " << b.frechet_samples << "\nprojection_seed = " << b.projection_seed
       << "\nsvd_rank = " << b.svd_rank << "\n";
    return os.str();
}

}  // namespace fine::cli
