#include <CLI11.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "saat/saat.hpp"

namespace fs = std::filesystem;
using namespace saat;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerify = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    bool f64 = false;
    std::string out;
};

std::size_t worker_count() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("SAAT_THREADS")) {
        try {
            n = std::max<std::size_t>(1, std::min<std::size_t>(n, std::stoul(env)));
        } catch (const std::exception&) {
            throw InvalidConfig(std::string("SAAT_THREADS must be a positive integer, got '") + env + "'");
        }
    }
    return n;
}

RunConfig load_run_config(const CommonFlags& f) {
    RunConfig rc = f.config.empty() ? RunConfig{} : RunConfig::load(f.config);
    if (f.seed) rc.train.seed = *f.seed;
    if (!f.out.empty()) rc.out_dir = f.out;
    rc.validate();
    return rc;
}

// ---------------------------------------------------------------------------

int cmd_check(const CommonFlags& f, const std::string& filter) {
    if (!filter.empty()) {
        const auto& names = verify::module_names();
        if (std::find(names.begin(), names.end(), filter) == names.end()) {
            std::string known;
            for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
            std::cerr << "error: unknown module '" << filter << "' (known: " << known << ")\n";
            return kExitUsage;
        }
    }
    if (const auto op = ad::testing::fault_op(); !op.empty()) {
        std::cout << "note: fault injection active for op '" << op << "'\n";
    }
    verify::Context ctx;
    ctx.f64 = f.f64;
    ctx.seed = f.seed.value_or(0);
    std::cout << "precision: " << (f.f64 ? "64-bit" : "32-bit analytic vs 64-bit numeric") << "\n";
    return verify::run_checks(ctx, filter, std::cout) == 0 ? kExitOk : kExitVerify;
}

std::vector<ImageBuffer> load_training_images(const std::string& root) {
    if (root.empty()) throw InvalidConfig("data.train_root is not set");
    std::vector<ImageBuffer> images;
    for (const auto& p : list_hr_images(root)) images.push_back(load_image(p.string()));
    return images;
}

template <typename T>
int run_training(const RunConfig& rc, const std::string& resume) {
    fs::create_directories(rc.out_dir);
    const auto images = load_training_images(rc.train_root);
    Trainer<T> trainer(rc.model, rc.train, images);
    if (!resume.empty()) trainer.load_state_file(resume);
    const auto trace_path = (fs::path(rc.out_dir) / "loss_trace.tsv").string();
    std::ofstream trace(trace_path, resume.empty() ? std::ios::trunc : std::ios::app);
    if (!trace) throw IoError("cannot write '" + trace_path + "'");
    std::cout << "training " << rc.train.steps << " steps from step " << trainer.step() << ", "
              << trainer.model().params().total_elements() << " parameters, milestones "
              << text::join(trainer.milestones()) << "\n";
    trainer.run(
        [&](const TraceEntry& e) {
            trace << format_trace_line(e);
            trace.flush();
            std::cout << "step " << e.step << "\tlr " << e.lr << "\tl1 " << e.l1 << "\n";
        },
        [&](std::size_t step) {
            const auto p = fs::path(rc.out_dir) / ("state_step" + std::to_string(step) + ".state");
            trainer.save_state(p.string());
        });
    const auto ckpt = rc.checkpoint.empty() ? (fs::path(rc.out_dir) / "model.ckpt").string() : rc.checkpoint;
    save_checkpoint(trainer.model(), ckpt);
    std::cout << "wrote " << ckpt << " and " << trace_path << "\n";
    return kExitOk;
}

int cmd_train(const CommonFlags& f, const std::string& resume) {
    const auto rc = load_run_config(f);
    return f.f64 ? run_training<double>(rc, resume) : run_training<float>(rc, resume);
}

int cmd_eval(const CommonFlags& f, std::string checkpoint, std::string data, std::size_t scale,
             const std::string& baseline) {
    std::optional<RunConfig> rc;
    if (!f.config.empty()) rc = load_run_config(f);
    if (data.empty() && rc) data = rc->eval_root;
    if (checkpoint.empty() && rc && baseline.empty()) checkpoint = rc->checkpoint;
    if (data.empty()) throw InvalidConfig("no dataset given (--data or data.eval_root)");
    if (!baseline.empty() && baseline != "bicubic" && baseline != "identity") {
        throw InvalidConfig("--baseline must be 'bicubic' or 'identity', got '" + baseline + "'");
    }

    std::optional<SaatModel<float>> model;
    if (baseline.empty()) {
        if (checkpoint.empty()) throw InvalidConfig("eval needs --checkpoint or --baseline");
        model.emplace(load_checkpoint<float>(checkpoint));
        const auto ck_scale = model->config().scale;
        if (scale != 0 && scale != ck_scale) {
            throw InvalidConfig("scale mismatch: checkpoint is x" + std::to_string(ck_scale) + ", --scale is x" +
                                std::to_string(scale));
        }
        scale = ck_scale;
    }
    if (scale == 0) throw InvalidConfig("--scale is required for baseline evaluation");
    if (scale < 2 || scale > 4) throw InvalidConfig("scale must be 2, 3 or 4");

    const auto files = list_hr_images(data);
    EvalReport report;
    report.shave = scale;
    report.rows.resize(files.size());
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr first_error;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next++;
            if (i >= files.size()) return;
            try {
                const auto hr = mod_crop(load_image(files[i].string()), scale);
                if (hr.channels != 3) throw InvalidShape("'" + files[i].string() + "' is not RGB");
                ImageBuffer sr;
                if (baseline == "identity") {
                    sr = hr;
                } else {
                    const auto lr = load_or_make_lr(data, files[i], hr, scale);
                    sr = baseline == "bicubic" ? bicubic_resize(lr, scale, 1)
                                               : tensor_to_image(model->infer(image_to_tensor<float>(lr)));
                }
                report.rows[i] = {files[i].filename().string(), psnr(sr, hr, scale, true), ssim(sr, hr, scale, true)};
            } catch (...) {
                std::lock_guard lk(err_mu);
                if (!first_error) first_error = std::current_exception();
                next = files.size();
            }
        }
    };
    const std::size_t n = std::min(worker_count(), files.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);

    const auto tsv = report.to_tsv();
    std::cout << tsv;
    if (!f.out.empty()) {
        fs::create_directories(f.out);
        io::write_file((fs::path(f.out) / "eval.tsv").string(), tsv);
    }
    return kExitOk;
}

int cmd_infer(const CommonFlags& f, std::string checkpoint, const std::string& input, std::string output) {
    if (checkpoint.empty() && !f.config.empty()) checkpoint = load_run_config(f).checkpoint;
    if (checkpoint.empty()) throw InvalidConfig("infer needs --checkpoint");
    auto model = load_checkpoint<float>(checkpoint);
    const auto img = load_image(input);
    if (img.channels != 3) throw InvalidShape("'" + input + "' is not an RGB image");
    const auto sr = tensor_to_image(model.infer(image_to_tensor<float>(img)));
    if (!f.out.empty() && !fs::path(output).has_parent_path()) {
        fs::create_directories(f.out);
        output = (fs::path(f.out) / output).string();
    }
    save_image(sr, output);
    std::cout << "wrote " << output << " (" << sr.width << "x" << sr.height << ")\n";
    return kExitOk;
}

int cmd_shapes(const CommonFlags& f, const std::string& preset) {
    ModelConfig cfg;
    if (!f.config.empty()) {
        cfg = load_run_config(f).model;
    } else if (preset == "full") {
        cfg = ModelConfig{};
    } else if (preset == "toy") {
        cfg = ModelConfig::toy(2);
    } else {
        throw InvalidConfig("--preset must be 'toy' or 'full'");
    }
    SaatModel<float> model(cfg, f.seed.value_or(0));
    std::size_t width = 4;
    for (const auto& e : model.params().entries()) width = std::max(width, e.name.size());
    std::cout << std::left << std::setw(static_cast<int>(width)) << "name" << "  " << std::setw(18) << "shape"
              << "count\n";
    for (const auto& e : model.params().entries()) {
        std::cout << std::left << std::setw(static_cast<int>(width)) << e.name << "  " << std::setw(18)
                  << shape_str(e.var.shape()) << e.var.numel() << "\n";
    }
    std::cout << "total " << model.params().total_elements() << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Single-image super-resolution with alternating spatial/channel attention groups"};
    app.require_subcommand(1);
    CommonFlags common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "Run configuration file (section.key = value)");
        sub->add_option("--seed", common.seed, "Random seed");
        sub->add_flag("--f64", common.f64, "Use 64-bit precision");
        sub->add_option("--out", common.out, "Output directory");
    };

    std::string filter;
    auto* check = app.add_subcommand("check", "Run the self-verification suites");
    add_common(check);
    check->add_option("--filter", filter, "Run only one module's suite");

    std::string resume;
    auto* train = app.add_subcommand("train", "Train a model at desk scale");
    add_common(train);
    train->add_option("--resume", resume, "Continue from a training state file");

    std::string checkpoint, data, baseline;
    std::size_t scale = 0;
    auto* eval = app.add_subcommand("eval", "Evaluate PSNR/SSIM on a dataset");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint, "Model checkpoint");
    eval->add_option("--data", data, "Dataset root containing HR/ and optional LRx{s}/");
    eval->add_option("--scale", scale, "Upscaling factor");
    eval->add_option("--baseline", baseline, "Evaluate 'bicubic' or 'identity' instead of a model");

    std::string input, output;
    auto* infer = app.add_subcommand("infer", "Super-resolve one image");
    add_common(infer);
    infer->add_option("--checkpoint", checkpoint, "Model checkpoint");
    infer->add_option("--input", input, "Input image (PNG or PPM)")->required();
    infer->add_option("--output", output, "Output image (.png or .ppm)")->required();

    std::string preset = "toy";
    auto* shapes = app.add_subcommand("shapes", "Print the parameter table");
    add_common(shapes);
    shapes->add_option("--preset", preset, "'toy' or 'full' when no --config is given");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (check->parsed()) return cmd_check(common, filter);
        if (train->parsed()) return cmd_train(common, resume);
        if (eval->parsed()) return cmd_eval(common, checkpoint, data, scale, baseline);
        if (infer->parsed()) return cmd_infer(common, checkpoint, input, output);
        if (shapes->parsed()) return cmd_shapes(common, preset);
    } catch (const InvalidConfig& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ShapeMismatch& e) {
        std::cerr << "shape mismatch: " << e.what() << "\n";
        return kExitUsage;
    } catch (const InvalidShape& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const CorruptCheckpoint& e) {
        std::cerr << "corrupt checkpoint: " << e.what() << "\n";
        return kExitIo;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    } catch (const NonFiniteLoss& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return kExitVerify;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitVerify;
    }
    return kExitUsage;
}
