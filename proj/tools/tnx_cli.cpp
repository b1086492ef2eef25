#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "tnx/archive.hpp"
#include "tnx/flops.hpp"
#include "tnx/selftest.hpp"

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitSelftest = 4;

tnx::ModelConfig resolve_config(const std::string& spec) {
    if (spec == "micro" || spec == "tiny" || spec == "small" || spec == "base")
        return tnx::ModelConfig::preset(spec);
    return tnx::load_config_file(spec);
}

void echo_config(const tnx::ModelConfig& cfg, std::uint64_t seed) {
    std::istringstream lines(tnx::config_to_text(cfg));
    std::string line;
    while (std::getline(lines, line)) std::cout << "# " << line << "\n";
    std::cout << "# seed=" << seed << "\n";
}

tnx::InferenceMode parse_mode(const std::string& mode) {
    if (mode == "normal") return tnx::InferenceMode::Normal;
    if (mode == "linear") return tnx::InferenceMode::Linear;
    throw tnx::ConfigError("mode must be 'normal' or 'linear', got '" + mode + "'");
}

tnx::Model<float> obtain_model(const std::string& config_spec, const std::string& weights,
                               std::uint64_t seed) {
    if (!weights.empty()) return tnx::load_model<float>(weights);
    return tnx::build_model<float>(resolve_config(config_spec), seed);
}

int cmd_info(const std::string& config_spec, int resolution, const std::string& mode_str,
             std::uint64_t seed) {
    const tnx::ModelConfig cfg = resolve_config(config_spec);
    const tnx::InferenceMode mode = parse_mode(mode_str);
    echo_config(cfg, seed);
    std::cout << "# resolution=" << resolution << " mode=" << mode_str << "\n";
    std::cout << "section,params,flops_mac1,flops_mac2\n";
    const tnx::FlopReport report = tnx::count_flops(cfg, resolution, resolution, mode);
    for (const auto& line : report.lines)
        std::cout << line.section << ',' << line.params << ',' << line.flops(1) << ','
                  << line.flops(2) << "\n";
    const auto total = report.total();
    std::cout << "total," << total.params << ',' << total.flops(1) << ',' << total.flops(2)
              << "\n";
    const auto params = tnx::count_params(cfg);
    if (params != total.params)
        throw tnx::ConfigError("parameter accountant disagrees with breakdown");
    return 0;
}

int cmd_forward(const std::string& config_spec, const std::string& weights, std::uint64_t seed,
                const std::string& input, const std::string& mode_str,
                const std::string& output) {
    const tnx::InferenceMode mode = parse_mode(mode_str);
    tnx::Model<float> model = obtain_model(config_spec, weights, seed);
    echo_config(model.config, seed);

    std::map<std::string, tnx::ArchiveEntry> entries;
    for (auto& e : tnx::read_archive(input)) entries.emplace(e.name, std::move(e));
    auto it = entries.find("image");
    if (it == entries.end())
        throw tnx::IoError("input archive has no tensor named 'image'");
    tnx::Tensor<float> image = tnx::entry_to_tensor<float>(it->second);
    tnx::Tensor<float> logits = tnx::forward(model, image, mode);

    std::vector<tnx::ArchiveEntry> out;
    out.push_back(tnx::make_entry("logits", logits));
    tnx::write_archive(output, std::move(out));
    std::cout << "# wrote logits [" << logits.size() << "] to " << output << "\n";
    return 0;
}

int cmd_bench(const std::string& kernel_case, int h, int w, int c, int heads, int k, int iters,
              int tile, std::uint64_t seed) {
    std::cout << "# seed=" << seed << " tile=" << tile << "\n";
    std::cout << "case,h,w,c,heads,k,iters,ns_per_iter,scratch_bytes\n";
    const tnx::BenchResult r = tnx::run_bench(kernel_case, h, w, c, heads, k, iters, tile, seed);
    std::cout << r.kernel_case << ',' << r.h << ',' << r.w << ',' << r.c << ',' << r.heads << ','
              << r.k << ',' << r.iters << ',' << static_cast<std::uint64_t>(r.ns_per_iter) << ','
              << r.scratch_bytes << "\n";
    return 0;
}

void write_pgm(const std::string& path, const tnx::Tensor<float>& grid) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw tnx::IoError("cannot write PGM '" + path + "'");
    out << "P5\n" << grid.dim(1) << " " << grid.dim(0) << "\n255\n";
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const float v = std::min(1.0f, std::max(0.0f, grid[i]));
        const unsigned char byte = static_cast<unsigned char>(v * 255.0f + 0.5f);
        out.write(reinterpret_cast<const char*>(&byte), 1);
    }
    if (!out) throw tnx::IoError("write to '" + path + "' failed");
}

int cmd_erf(const std::string& config_spec, const std::string& weights, std::uint64_t seed,
            const std::string& input, int resolution, int stage, double step, bool force,
            const std::string& mode_str, const std::string& output_prefix) {
    const tnx::InferenceMode mode = parse_mode(mode_str);
    tnx::Model<float> model = obtain_model(config_spec, weights, seed);
    echo_config(model.config, seed);
    tnx::Tensor<float> image;
    if (!input.empty()) {
        std::map<std::string, tnx::ArchiveEntry> entries;
        for (auto& e : tnx::read_archive(input)) entries.emplace(e.name, std::move(e));
        auto it = entries.find("image");
        if (it == entries.end()) throw tnx::IoError("input archive has no tensor named 'image'");
        image = tnx::entry_to_tensor<float>(it->second);
    } else {
        tnx::Rng rng(seed);
        image = tnx::Tensor<float>({3, static_cast<std::size_t>(resolution),
                                    static_cast<std::size_t>(resolution)});
        for (std::size_t i = 0; i < image.size(); ++i)
            image[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    std::cout << "# stage=" << stage << " step=" << step << " image=" << image.shape_str()
              << "\n";
    tnx::Tensor<float> grid = tnx::erf_saliency(model, image, stage, step, force, mode);

    const std::string txt_path = output_prefix + ".txt";
    std::ofstream txt(txt_path);
    if (!txt) throw tnx::IoError("cannot write '" + txt_path + "'");
    for (std::size_t i = 0; i < grid.dim(0); ++i) {
        for (std::size_t j = 0; j < grid.dim(1); ++j) {
            if (j) txt << ' ';
            txt << grid.at(i, j);
        }
        txt << '\n';
    }
    txt.close();
    write_pgm(output_prefix + ".pgm", grid);
    std::size_t nonzero = 0;
    for (std::size_t i = 0; i < grid.size(); ++i)
        if (grid[i] > 0.0f) ++nonzero;
    std::cout << "grid_h,grid_w,nonzero\n"
              << grid.dim(0) << ',' << grid.dim(1) << ',' << nonzero << "\n";
    std::cout << "# wrote " << txt_path << " and " << output_prefix << ".pgm\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TransNeXt computational core: info, forward, bench, erf, selftest"};
    app.require_subcommand(1);

    std::string config_spec = "micro", weights, input, output, mode = "normal";
    std::string kernel_case = "fused";
    std::uint64_t seed = 0;
    int resolution = 224, stage = 3, h = 56, w = 56, c = 72, heads = 3, k = 3, iters = 10,
        tile = 8;
    double step = 1e-3;
    bool force = false;

    auto* info = app.add_subcommand("info", "parameter and FLOP report");
    info->add_option("--config", config_spec, "micro|tiny|small|base or config file path");
    info->add_option("--resolution", resolution, "input resolution (multiple of 32)");
    info->add_option("--mode", mode, "normal|linear");

    auto* fwd = app.add_subcommand("forward", "run the backbone on a tensor archive");
    fwd->add_option("--config", config_spec, "micro|tiny|small|base or config file path");
    fwd->add_option("--weights", weights, "weight archive (else seeded init)");
    fwd->add_option("--seed", seed, "init seed when no weights are given");
    fwd->add_option("--input", input, "input archive holding tensor 'image' [3,H,W]")
        ->required();
    fwd->add_option("--mode", mode, "normal|linear");
    fwd->add_option("--output", output, "output archive for tensor 'logits'")->required();

    auto* bench = app.add_subcommand("bench", "sliding-window kernel micro-benchmark");
    bench->add_option("--case", kernel_case, "fused|naive");
    bench->add_option("--h", h, "feature height");
    bench->add_option("--w", w, "feature width");
    bench->add_option("--c", c, "channels");
    bench->add_option("--heads", heads, "attention heads");
    bench->add_option("--k", k, "window extent (odd)");
    bench->add_option("--iters", iters, "timed iterations");
    bench->add_option("--tile", tile, "output tile extent for the fused path");
    bench->add_option("--seed", seed, "input seed");

    auto* erf = app.add_subcommand("erf", "finite-difference receptive-field saliency");
    erf->add_option("--config", config_spec, "micro|tiny|small|base or config file path");
    erf->add_option("--weights", weights, "weight archive (else seeded init)");
    erf->add_option("--seed", seed, "init / image seed");
    erf->add_option("--input", input, "optional archive holding tensor 'image'");
    erf->add_option("--resolution", resolution, "random-image resolution when no input");
    erf->add_option("--stage", stage, "probe stage 1..4");
    erf->add_option("--step", step, "finite-difference step");
    erf->add_option("--mode", mode, "normal|linear");
    erf->add_flag("--force", force, "override the 64x64 desk-scale guard");
    erf->add_option("--output", output, "output path prefix (.txt and .pgm)")->required();

    auto* selftest = app.add_subcommand("selftest", "run every oracle suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    try {
        if (info->parsed()) return cmd_info(config_spec, resolution, mode, seed);
        if (fwd->parsed()) return cmd_forward(config_spec, weights, seed, input, mode, output);
        if (bench->parsed())
            return cmd_bench(kernel_case, h, w, c, heads, k, iters, tile, seed);
        if (erf->parsed())
            return cmd_erf(config_spec, weights, seed, input, resolution, stage, step, force,
                           mode, output);
        if (selftest->parsed()) {
            std::cout << "# seed=" << seed << "\n";
            const int failures = tnx::run_selftest(std::cout);
            return failures == 0 ? 0 : kExitSelftest;
        }
    } catch (const tnx::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const tnx::SelftestFailure& e) {
        std::cerr << "selftest failure: " << e.what() << "\n";
        return kExitSelftest;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return 0;
}
