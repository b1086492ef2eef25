#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "tnx/backbone.hpp"

namespace tnx {

namespace {

ModelConfig stock(std::array<int, 4> channels, std::array<int, 4> blocks) {
    ModelConfig c;
    const std::array<double, 4> ratio = {8, 8, 4, 4};
    for (int s = 0; s < 4; ++s) {
        c.stages[s].channels = channels[s];
        c.stages[s].blocks = blocks[s];
        c.stages[s].mlp_ratio = ratio[s];
        c.stages[s].mixer = s == 3 ? MixerKind::Mhsa : MixerKind::AggregatedAttention;
        c.stages[s].window_k = s == 3 ? 0 : 3;
        c.stages[s].pool = s == 3 ? 0 : 32;
    }
    c.pool_mode = PoolMode::Ratio;
    return c;
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    for (char ch : s) {
        if (ch == ',') {
            parts.push_back(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(ch))) {
            cur.push_back(ch);
        }
    }
    parts.push_back(cur);
    return parts;
}

}  // namespace

ModelConfig ModelConfig::preset(const std::string& name) {
    if (name == "micro") return stock({48, 96, 192, 384}, {2, 2, 15, 2});
    if (name == "tiny") return stock({72, 144, 288, 576}, {2, 2, 15, 2});
    if (name == "small") return stock({72, 144, 288, 576}, {5, 5, 22, 5});
    if (name == "base") return stock({96, 192, 384, 768}, {5, 5, 23, 5});
    throw ConfigError("unknown preset '" + name + "' (want micro|tiny|small|base)");
}

void validate_config(const ModelConfig& config) {
    for (int s = 0; s < 4; ++s) {
        const StageConfig& sc = config.stages[s];
        if (sc.channels <= 0 || sc.channels % kHeadDim != 0)
            throw ConfigError("stage " + std::to_string(s + 1) + " channels " +
                              std::to_string(sc.channels) + " not divisible by head dim " +
                              std::to_string(kHeadDim));
        if (sc.blocks <= 0) throw ConfigError("stage block count must be positive");
        if (sc.mlp_ratio <= 0) throw ConfigError("mlp ratio must be positive");
        if (sc.mixer == MixerKind::AggregatedAttention) {
            if (sc.window_k <= 0 || sc.window_k % 2 == 0)
                throw ConfigError("stage " + std::to_string(s + 1) +
                                  " window extent must be odd and positive");
            if (sc.pool <= 0)
                throw ConfigError("stage " + std::to_string(s + 1) + " pool value must be set");
        }
    }
    if (config.num_classes <= 0) throw ConfigError("num_classes must be positive");
}

int pooled_extent(const ModelConfig& config, int stage, int input_extent, InferenceMode mode) {
    const StageConfig& sc = config.stages[stage];
    if (sc.mixer != MixerKind::AggregatedAttention) return 0;
    if (config.pool_mode == PoolMode::Fixed) return sc.pool;
    const int base = mode == InferenceMode::Normal ? input_extent : kTrainResolution;
    if (base % sc.pool != 0)
        throw ShapeError("input extent " + std::to_string(base) + " not divisible by pool ratio " +
                         std::to_string(sc.pool) + " at stage " + std::to_string(stage + 1));
    return base / sc.pool;
}

ModelConfig parse_config_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line without '=': " + line);
        std::string key = line.substr(0, eq);
        while (!key.empty() && std::isspace(static_cast<unsigned char>(key.back()))) key.pop_back();
        if (!kv.emplace(key, line.substr(eq + 1)).second)
            throw ConfigError("duplicate config key '" + key + "'");
    }
    const std::vector<std::string> required = {"channels", "blocks", "mlp_ratio", "mixers",
                                               "window",   "pool",   "pool_mode"};
    for (const auto& key : required)
        if (!kv.count(key)) throw ConfigError("config is missing key '" + key + "'");
    for (const auto& [key, value] : kv) {
        if (std::find(required.begin(), required.end(), key) == required.end())
            throw ConfigError("unknown config key '" + key + "'");
    }

    auto per_stage = [&](const std::string& key) {
        auto parts = split_commas(kv.at(key));
        if (parts.size() != 4)
            throw ConfigError("config key '" + key + "' must list 4 per-stage values");
        return parts;
    };

    ModelConfig c;
    const auto channels = per_stage("channels");
    const auto blocks = per_stage("blocks");
    const auto ratio = per_stage("mlp_ratio");
    const auto mixers = per_stage("mixers");
    const auto window = per_stage("window");
    const auto pool = per_stage("pool");
    for (int s = 0; s < 4; ++s) {
        try {
            c.stages[s].channels = std::stoi(channels[s]);
            c.stages[s].blocks = std::stoi(blocks[s]);
            c.stages[s].mlp_ratio = std::stod(ratio[s]);
            c.stages[s].window_k = std::stoi(window[s]);
            c.stages[s].pool = std::stoi(pool[s]);
        } catch (const std::exception&) {
            throw ConfigError("config has a non-numeric per-stage value at stage " +
                              std::to_string(s + 1));
        }
        if (mixers[s] == "A")
            c.stages[s].mixer = MixerKind::AggregatedAttention;
        else if (mixers[s] == "M")
            c.stages[s].mixer = MixerKind::Mhsa;
        else
            throw ConfigError("mixer must be A or M, got '" + mixers[s] + "'");
    }
    std::string mode = kv.at("pool_mode");
    mode.erase(std::remove_if(mode.begin(), mode.end(),
                              [](unsigned char ch) { return std::isspace(ch); }),
               mode.end());
    if (mode == "ratio")
        c.pool_mode = PoolMode::Ratio;
    else if (mode == "fixed")
        c.pool_mode = PoolMode::Fixed;
    else
        throw ConfigError("pool_mode must be 'ratio' or 'fixed', got '" + mode + "'");
    validate_config(c);
    return c;
}

ModelConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string config_to_text(const ModelConfig& config) {
    auto join = [&](auto get) {
        std::ostringstream os;
        for (int s = 0; s < 4; ++s) {
            if (s) os << ',';
            os << get(config.stages[s]);
        }
        return os.str();
    };
    std::ostringstream os;
    os << "channels=" << join([](const StageConfig& s) { return std::to_string(s.channels); })
       << "\nblocks=" << join([](const StageConfig& s) { return std::to_string(s.blocks); })
       << "\nmlp_ratio=" << join([](const StageConfig& s) {
              std::ostringstream r;
              r << s.mlp_ratio;
              return r.str();
          })
       << "\nmixers=" << join([](const StageConfig& s) {
              return std::string(s.mixer == MixerKind::Mhsa ? "M" : "A");
          })
       << "\nwindow=" << join([](const StageConfig& s) { return std::to_string(s.window_k); })
       << "\npool_mode=" << (config.pool_mode == PoolMode::Fixed ? "fixed" : "ratio")
       << "\npool=" << join([](const StageConfig& s) { return std::to_string(s.pool); }) << "\n";
    return os.str();
}

}  // namespace tnx
