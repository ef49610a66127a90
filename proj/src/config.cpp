#include "voxfuse/config.hpp"

#include <cstdio>
#include <functional>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "voxfuse/errors.hpp"

namespace voxfuse {

namespace {

struct Field {
    const char* name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double to_double(const std::string& s) {
    size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
}

int to_int(const std::string& s) {
    size_t used = 0;
    const long v = std::stol(s, &used);
    if (used != s.size() || v < INT32_MIN || v > INT32_MAX) throw std::invalid_argument(s);
    return static_cast<int>(v);
}

uint64_t to_u64(const std::string& s) {
    size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
}

bool to_bool(const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw std::invalid_argument(s);
}

Field fd(const char* name, double RunConfig::* p) {
    return {name, [p](const RunConfig& c) { return fmt_double(c.*p); },
            [p](RunConfig& c, const std::string& v) { c.*p = to_double(v); }};
}
Field fi(const char* name, int RunConfig::* p) {
    return {name, [p](const RunConfig& c) { return std::to_string(c.*p); },
            [p](RunConfig& c, const std::string& v) { c.*p = to_int(v); }};
}
Field fb(const char* name, bool RunConfig::* p) {
    return {name, [p](const RunConfig& c) { return c.*p ? "true" : "false"; },
            [p](RunConfig& c, const std::string& v) { c.*p = to_bool(v); }};
}
Field fu(const char* name, uint64_t RunConfig::* p) {
    return {name, [p](const RunConfig& c) { return std::to_string(c.*p); },
            [p](RunConfig& c, const std::string& v) { c.*p = to_u64(v); }};
}
Field fs(const char* name, std::string RunConfig::* p) {
    return {name, [p](const RunConfig& c) { return c.*p; },
            [p](RunConfig& c, const std::string& v) { c.*p = v; }};
}

const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        fd("voxel_resolution", &RunConfig::voxel_resolution),
        fd("depth_cutoff", &RunConfig::depth_cutoff),
        fi("feat_dim", &RunConfig::feat_dim),
        fi("enc_width", &RunConfig::enc_width),
        fi("enc3d_levels", &RunConfig::enc3d_levels),
        fi("aux_hidden", &RunConfig::aux_hidden),
        fi("expert_layers", &RunConfig::expert_layers),
        fi("expert_hidden", &RunConfig::expert_hidden),
        fi("expert_heads", &RunConfig::expert_heads),
        fb("softmax_attention", &RunConfig::softmax_attention),
        fi("classes", &RunConfig::classes),
        fi("ignore_label", &RunConfig::ignore_label),
        fd("gamma", &RunConfig::gamma),
        fd("lambda_2d", &RunConfig::lambda_2d),
        fd("lambda_3d", &RunConfig::lambda_3d),
        fd("lambda_expert", &RunConfig::lambda_expert),
        fd("lr_core", &RunConfig::lr_core),
        fd("lr_pretrained_2d", &RunConfig::lr_pretrained_2d),
        fi("epochs", &RunConfig::epochs),
        fi("micro_batches", &RunConfig::micro_batches),
        fi("micro_batch_scenes", &RunConfig::micro_batch_scenes),
        fi("frames_per_scene_step", &RunConfig::frames_per_scene_step),
        fd("scene_reset_probability", &RunConfig::scene_reset_probability),
        fd("warmup_fraction", &RunConfig::warmup_fraction),
        fd("initial_lr_divisor", &RunConfig::initial_lr_divisor),
        fd("final_lr_divisor", &RunConfig::final_lr_divisor),
        fu("seed", &RunConfig::seed),
        fi("image_width", &RunConfig::image_width),
        fi("image_height", &RunConfig::image_height),
        fi("frames_per_scene", &RunConfig::frames_per_scene),
        fi("train_scenes", &RunConfig::train_scenes),
        fi("eval_scenes", &RunConfig::eval_scenes),
        fd("depth_noise", &RunConfig::depth_noise),
        fs("run_dir", &RunConfig::run_dir),
        fs("data_dir", &RunConfig::data_dir),
        fi("checkpoint_every", &RunConfig::checkpoint_every),
    };
    return f;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

void RunConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if (voxel_resolution <= 0.0) fail("voxel_resolution must be positive");
    if (depth_cutoff <= 0.0) fail("depth_cutoff must be positive");
    if (feat_dim <= 0 || enc_width <= 0 || aux_hidden <= 0) fail("feature sizes must be positive");
    if (enc3d_levels < 1) fail("enc3d_levels must be at least 1");
    if (expert_layers < 1 || expert_hidden < 1) fail("expert sizes must be positive");
    if (expert_heads < 1 || feat_dim % expert_heads != 0)
        fail("expert_heads must divide feat_dim");
    if (classes < 2) fail("classes must be at least 2");
    if (ignore_label >= 0 && ignore_label < classes) fail("ignore_label must lie outside 0..classes-1");
    if (gamma < 0.0) fail("gamma must be nonnegative");
    if (lambda_2d < 0.0 || lambda_3d < 0.0 || lambda_expert < 0.0)
        fail("loss weights must be nonnegative");
    if (lr_core <= 0.0 || lr_pretrained_2d <= 0.0) fail("learning rates must be positive");
    if (epochs < 1) fail("epochs must be at least 1");
    if (micro_batches < 1 || micro_batch_scenes < 1) fail("batch sizes must be at least 1");
    if (frames_per_scene_step < 1) fail("frames_per_scene_step must be at least 1");
    if (scene_reset_probability < 0.0 || scene_reset_probability > 1.0)
        fail("scene_reset_probability must lie in [0,1]");
    if (warmup_fraction <= 0.0 || warmup_fraction >= 1.0) fail("warmup_fraction must lie in (0,1)");
    if (initial_lr_divisor < 1.0 || final_lr_divisor < 1.0) fail("lr divisors must be at least 1");
    if (image_width < 4 || image_height < 4 || image_width % 2 || image_height % 2)
        fail("image sides must be even and at least 4");
    if (frames_per_scene < 1) fail("frames_per_scene must be at least 1");
    if (train_scenes < 1 || eval_scenes < 0) fail("scene counts invalid");
    if (checkpoint_every < 1) fail("checkpoint_every must be at least 1");
}

RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (!seen.insert(key).second)
            throw ConfigError("config: duplicate key '" + key + "'");
        bool matched = false;
        for (const auto& f : fields()) {
            if (key == f.name) {
                try {
                    f.set(cfg, val);
                } catch (const std::exception&) {
                    throw ConfigError("config: bad value '" + val + "' for key '" + key + "'");
                }
                matched = true;
                break;
            }
        }
        if (!matched) throw ConfigError("config: unknown key '" + key + "'");
    }
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_config(buf.str());
}

std::string format_config(const RunConfig& cfg) {
    std::ostringstream out;
    for (const auto& f : fields()) out << f.name << " = " << f.get(cfg) << "\n";
    return out.str();
}

void save_config(const std::string& path, const RunConfig& cfg) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open config file for writing: " + path);
    f << format_config(cfg);
    if (!f) throw ConfigError("short write: " + path);
}

}  // namespace voxfuse
