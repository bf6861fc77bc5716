// Command-line front end: data generation, training, coding and evaluation.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "cmc/checkpoint.hpp"
#include "cmc/dataset.hpp"
#include "cmc/report.hpp"
#include "cmc/trainer.hpp"

using namespace cmc;

namespace {

struct SceneOptions {
    SceneConfig scene;
    ArrayConfig array;
    int count = 1000;
    bool normalize = true;
};

// Minimal TOML subset for scene files: `key = value` lines, # comments,
// numbers and booleans. Applied before argument parsing so command-line
// flags win over file values.
void apply_scene_file(const std::string& path, SceneOptions& o) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open scene file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty() || val.empty()) continue;
        for (char& c : key)
            if (c == '_') c = '-';
        const bool truthy = val == "true" || val == "1";
        if (key == "n-subcarriers") o.scene.n_subcarriers = std::stoi(val);
        else if (key == "n-antennas") o.array.n_antennas = std::stoi(val);
        else if (key == "antenna-spacing") o.array.spacing_over_wavelength = std::stod(val);
        else if (key == "sampling-rate") o.scene.sampling_rate_hz = std::stod(val);
        else if (key == "shared-paths") o.scene.n_shared_paths = std::stoi(val);
        else if (key == "local-paths") o.scene.n_local_paths_per_user = std::stoi(val);
        else if (key == "users") o.scene.n_users = std::stoi(val);
        else if (key == "area-side") o.scene.area_side_m = std::stod(val);
        else if (key == "delay-spread") o.scene.delay_spread_s = std::stod(val);
        else if (key == "seed") o.scene.rng_seed = std::stoull(val);
        else if (key == "single-aod") o.scene.single_aod_per_user = truthy;
        else if (key == "count") o.count = std::stoi(val);
        else if (key == "normalize") o.normalize = truthy;
        else
            throw std::runtime_error("scene file " + path + ": unknown key '" + key +
                                     "' on line " + std::to_string(lineno));
    }
}

void add_scene_options(CLI::App* cmd, SceneOptions& o) {
    cmd->add_option("--n-subcarriers", o.scene.n_subcarriers, "subcarrier count N_c");
    cmd->add_option("--n-antennas", o.array.n_antennas, "transmit antenna count N_t");
    cmd->add_option("--antenna-spacing", o.array.spacing_over_wavelength,
                    "antenna spacing over wavelength");
    cmd->add_option("--sampling-rate", o.scene.sampling_rate_hz, "sampling rate in Hz");
    cmd->add_option("--shared-paths", o.scene.n_shared_paths,
                    "far-scatterer paths common to all users");
    cmd->add_option("--local-paths", o.scene.n_local_paths_per_user, "paths private to each user");
    cmd->add_option("--users", o.scene.n_users, "users per scene");
    cmd->add_option("--area-side", o.scene.area_side_m, "placement square side in meters");
    cmd->add_option("--delay-spread", o.scene.delay_spread_s, "delay spread in seconds");
    cmd->add_option("--seed", o.scene.rng_seed, "generator seed");
    cmd->add_flag("--single-aod", o.scene.single_aod_per_user,
                  "one angle of departure per user instead of per path");
    cmd->add_option("--count", o.count, "number of scenes to draw");
    cmd->add_flag("!--no-normalize", o.normalize, "skip unit-power normalization");
}

void add_codec_options(CLI::App* cmd, CodecConfig& c) {
    cmd->add_option("--base-channels", c.base_channels, "convolution width");
    cmd->add_option("--latent-channels", c.latent_channels, "bottleneck channels");
    cmd->add_option("--down", c.down, "encoder downsample factors")->expected(3);
    cmd->add_option("--res-blocks", c.n_res_blocks, "decoder residual blocks");
    cmd->add_flag("!--no-entropy", c.entropy_coding,
                  "disable entropy coding; send float32 latents");
    cmd->add_flag("--transposed-upsample", c.upsample_transposed,
                  "transposed convolutions instead of nearest-neighbour upsampling");
    cmd->add_flag("!--no-decoder-bn", c.decoder_plain_bn,
                  "drop batch norm from the plain decoder convs");
    cmd->add_flag("!--act-before-bn", c.resblock_bn_before_act,
                  "PReLU before batch norm inside residual blocks");
    cmd->add_flag("!--shared-density", c.entropy_per_channel,
                  "one shared density instead of per-channel densities");
}

void add_train_options(CLI::App* cmd, TrainConfig& t) {
    cmd->add_option("--steps", t.steps, "training steps");
    cmd->add_option("--batch", t.batch_size, "batch size");
    cmd->add_option("--lr", t.learning_rate, "Adam learning rate");
    cmd->add_option("--seed", t.seed, "training seed");
    cmd->add_option("--holdout", t.holdout_fraction, "held-out fraction");
    cmd->add_flag("!--literal-noise", t.centered_noise,
                  "U[0,1) training noise instead of centered U[-0.5,0.5)");
}

std::string user_path(const std::string& stem, int user, int n_users) {
    if (n_users == 1) return stem;
    const auto dot = stem.rfind('.');
    const std::string base = dot == std::string::npos ? stem : stem.substr(0, dot);
    const std::string ext = dot == std::string::npos ? ".csid" : stem.substr(dot);
    return base + "_user" + std::to_string(user) + ext;
}

std::vector<uint8_t> slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
}

void dump(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for write");
    f << text;
}

int run(int argc, char** argv) {
    CLI::App app{"learned CSI compression toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "read options from a TOML file");

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "synthesize a multipath CSI dataset");
    SceneOptions gen_opts;
    // scene file values become the defaults; explicit flags override them
    for (int i = 1; i + 1 < argc; ++i)
        if (std::strcmp(argv[i], "--scene") == 0) apply_scene_file(argv[i + 1], gen_opts);
    std::string gen_out, gen_scene;
    add_scene_options(gen, gen_opts);
    gen->add_option("--out", gen_out, "output dataset path (CSID)")->required();
    gen->add_option("--scene", gen_scene, "scene description TOML");

    // ---- train ----
    auto* tr = app.add_subcommand("train", "train a single-user model");
    std::string tr_data, tr_out, tr_report;
    CodecConfig tr_codec;
    TrainConfig tr_cfg;
    double tr_lambda = 1.0;
    uint64_t tr_model_seed = 0;
    tr->add_option("--data", tr_data, "training dataset (CSID)")->required();
    tr->add_option("--lambda", tr_lambda, "rate-distortion weight")->required();
    tr->add_option("--out", tr_out, "checkpoint path")->required();
    tr->add_option("--report", tr_report, "training report JSON path");
    tr->add_option("--model-seed", tr_model_seed, "weight initialization seed");
    tr->add_option("--lambda-code", tr_cfg.lambda_code, "lambda registry code for the header");
    add_codec_options(tr, tr_codec);
    add_train_options(tr, tr_cfg);

    // ---- fine-tune ----
    auto* ft = app.add_subcommand("fine-tune",
                                  "train a joint decoder starting from a single-user model");
    std::string ft_init, ft_out, ft_report;
    std::vector<std::string> ft_data;
    std::vector<double> ft_lambdas;
    TrainConfig ft_cfg;
    ft_cfg.steps = 1000;
    ft->add_option("--init", ft_init, "single-user checkpoint")->required();
    ft->add_option("--data", ft_data, "per-user datasets, aligned by scene")
        ->required()
        ->expected(-2);
    ft->add_option("--lambda", ft_lambdas, "per-user weights (default: from the checkpoint)");
    ft->add_option("--out", ft_out, "joint checkpoint path")->required();
    ft->add_option("--report", ft_report, "training report JSON path");
    add_train_options(ft, ft_cfg);

    // ---- rd-sweep ----
    auto* sw = app.add_subcommand("rd-sweep", "train one model per lambda and tabulate results");
    std::string sw_data, sw_dir, sw_csv, sw_svg;
    std::vector<double> sw_lambdas;
    CodecConfig sw_codec;
    TrainConfig sw_cfg;
    uint64_t sw_model_seed = 0;
    sw->add_option("--data", sw_data, "training dataset (CSID)")->required();
    sw->add_option("--lambdas", sw_lambdas, "comma-separated lambda list")
        ->required()
        ->delimiter(',');
    sw->add_option("--out-dir", sw_dir, "directory for per-lambda checkpoints");
    sw->add_option("--csv", sw_csv, "results table path");
    sw->add_option("--svg", sw_svg, "rate-distortion plot path");
    sw->add_option("--model-seed", sw_model_seed, "weight initialization seed");
    add_codec_options(sw, sw_codec);
    add_train_options(sw, sw_cfg);

    // ---- encode / decode ----
    auto* en = app.add_subcommand("encode", "compress CSI matrices to bitstreams");
    std::string en_model;
    std::vector<std::string> en_in, en_out;
    en->add_option("--model", en_model, "checkpoint")->required();
    en->add_option("--in", en_in, "input dataset(s), one per user for joint models")->required();
    en->add_option("--out", en_out, "output bitstream file(s)")->required();

    auto* de = app.add_subcommand("decode", "reconstruct CSI matrices from bitstreams");
    std::string de_model;
    std::vector<std::string> de_in, de_out;
    de->add_option("--model", de_model, "checkpoint")->required();
    de->add_option("--in", de_in, "input bitstream file(s)")->required();
    de->add_option("--out", de_out, "output dataset(s)")->required();

    // ---- evaluate ----
    auto* ev = app.add_subcommand("evaluate", "run the full codec over a dataset and report");
    std::string ev_model, ev_csv, ev_json, ev_series = "single";
    std::vector<std::string> ev_data;
    ev->add_option("--model", ev_model, "checkpoint")->required();
    ev->add_option("--data", ev_data, "dataset(s); joint models take one per user")->required();
    ev->add_option("--csv", ev_csv, "append-style CSV output");
    ev->add_option("--json", ev_json, "JSON output");
    ev->add_option("--series", ev_series, "series label for the CSV");

    // ---- cluster ----
    auto* cl = app.add_subcommand("cluster", "group users by position for joint decoding");
    std::string cl_data;
    double cl_threshold = 1.0;
    cl->add_option("--data", cl_data, "dataset with user positions")->required();
    cl->add_option("--threshold", cl_threshold, "pairwise distance bound in meters");

    // ---- plot ----
    auto* pl = app.add_subcommand("plot", "render a rate-distortion SVG from result CSVs");
    std::vector<std::string> pl_csv;
    std::string pl_svg;
    pl->add_option("--csv", pl_csv, "input CSV file(s)")->required();
    pl->add_option("--svg", pl_svg, "output SVG path")->required();

    CLI11_PARSE(app, argc, argv);

    const std::string config_text = app.config_to_str(true, false);

    if (gen->parsed()) {
        gen_opts.scene.validate();
        gen_opts.array.validate();
        Rng rng(gen_opts.scene.rng_seed);
        const int K = gen_opts.scene.n_users;
        std::vector<std::vector<ChannelMatrix>> per_user(static_cast<size_t>(K));
        for (int i = 0; i < gen_opts.count; ++i) {
            const MultiUserScene scene = sample_scene(gen_opts.scene, rng);
            for (int k = 0; k < K; ++k)
                per_user[size_t(k)].push_back(
                    generate_channel(scene, k, gen_opts.scene, gen_opts.array));
        }
        if (gen_opts.normalize) {
            // one global constant across all users
            std::vector<ChannelMatrix> all;
            for (auto& d : per_user) all.insert(all.end(), d.begin(), d.end());
            const double scale = normalize_dataset(all);
            for (auto& d : per_user)
                for (auto& m : d)
                    for (cplx& v : m.data) v *= scale;
        }
        for (int k = 0; k < K; ++k) {
            std::vector<ChannelMatrix> store;
            store.reserve(per_user[size_t(k)].size());
            for (const auto& m : per_user[size_t(k)]) store.push_back(to_storage_precision(m));
            const std::string path = user_path(gen_out, k, K);
            write_dataset(path, store);
            std::printf("wrote %zu matrices to %s\n", store.size(), path.c_str());
        }
        write_manifest(gen_out, "gen-data", config_text, gen_opts.scene.rng_seed);
        return 0;
    }

    if (tr->parsed()) {
        auto data = read_dataset(tr_data);
        SingleUserModel model = SingleUserModel::create(tr_codec, tr_model_seed);
        tr_cfg.lambda = tr_lambda;
        TrainReport report = train(model, data, tr_cfg);
        if (!tr_report.empty()) dump(tr_report, report_to_json(report));
        if (report.diverged) {
            std::fprintf(stderr, "training diverged; checkpoint not written\n");
            return 2;
        }
        save_checkpoint(tr_out, model);
        write_manifest(tr_out, "train", config_text, tr_cfg.seed);
        if (report.heldout_valid)
            std::printf("held-out: rate %.5f bpe, entropy %.5f bpe, NMSE %.2f dB, rho %.4f\n",
                        report.heldout.rate_bpe, report.heldout.entropy_bpe,
                        report.heldout.nmse.db, report.heldout.rho);
        return 0;
    }

    if (ft->parsed()) {
        SingleUserModel single = load_single_checkpoint(ft_init);
        std::vector<std::vector<ChannelMatrix>> per_user;
        for (const auto& p : ft_data) per_user.push_back(read_dataset(p));
        if (!ft_lambdas.empty()) ft_cfg.lambdas = ft_lambdas;
        else ft_cfg.lambda = single.lambda;
        TrainReport report;
        MultiUserModel joint = fine_tune(single, per_user, ft_cfg, &report);
        if (!ft_report.empty()) dump(ft_report, report_to_json(report));
        if (report.diverged) {
            std::fprintf(stderr, "fine-tuning diverged; checkpoint not written\n");
            return 2;
        }
        save_checkpoint(ft_out, joint);
        write_manifest(ft_out, "fine-tune", config_text, ft_cfg.seed);
        if (report.heldout_valid)
            std::printf("held-out (avg): rate %.5f bpe, NMSE %.2f dB, rho %.4f\n",
                        report.heldout.rate_bpe, report.heldout.nmse.db, report.heldout.rho);
        return 0;
    }

    if (sw->parsed()) {
        auto data = read_dataset(sw_data);
        std::vector<SingleUserModel> models;
        const auto points = rd_sweep(sw_codec, data, sw_lambdas, sw_cfg, &models, sw_model_seed);
        std::vector<ResultRow> rows;
        for (size_t i = 0; i < points.size(); ++i) {
            rows.push_back(to_row("sweep", points[i].heldout));
            rows.back().lambda = points[i].lambda;
            if (!sw_dir.empty()) {
                std::filesystem::create_directories(sw_dir);
                save_checkpoint(sw_dir + "/lambda" + std::to_string(i) + ".dcmc", models[i]);
            }
            std::printf("lambda %.4g: rate %.5f bpe, NMSE %.2f dB, rho %.4f\n", points[i].lambda,
                        points[i].heldout.rate_bpe, points[i].heldout.nmse.db,
                        points[i].heldout.rho);
        }
        if (!sw_csv.empty()) {
            write_results_csv(sw_csv, rows);
            write_manifest(sw_csv, "rd-sweep", config_text, sw_cfg.seed);
        }
        if (!sw_svg.empty()) write_rd_svg(sw_svg, rows);
        return 0;
    }

    if (en->parsed()) {
        if (en_in.size() != en_out.size())
            throw CLI::ValidationError("encode", "--in and --out must pair up");
        if (checkpoint_is_multi(en_model)) {
            MultiUserModel model = load_multi_checkpoint(en_model);
            if (static_cast<int>(en_in.size()) != model.n_users)
                throw CLI::ValidationError("encode", "joint model needs one input per user");
            for (int k = 0; k < model.n_users; ++k) {
                const auto data = read_dataset(en_in[size_t(k)]);
                std::vector<uint8_t> bytes;
                for (const auto& h : data) {
                    const auto s = serialize_bitstream(compress_user(model, k, h));
                    bytes.insert(bytes.end(), s.begin(), s.end());
                }
                std::ofstream f(en_out[size_t(k)], std::ios::binary);
                f.write(reinterpret_cast<const char*>(bytes.data()), long(bytes.size()));
                std::printf("%s: %zu streams, %zu bytes\n", en_out[size_t(k)].c_str(), data.size(),
                            bytes.size());
            }
        } else {
            SingleUserModel model = load_single_checkpoint(en_model);
            for (size_t i = 0; i < en_in.size(); ++i) {
                const auto data = read_dataset(en_in[i]);
                std::vector<uint8_t> bytes;
                for (const auto& h : data) {
                    const auto s = serialize_bitstream(compress(model, h));
                    bytes.insert(bytes.end(), s.begin(), s.end());
                }
                std::ofstream f(en_out[i], std::ios::binary);
                f.write(reinterpret_cast<const char*>(bytes.data()), long(bytes.size()));
                std::printf("%s: %zu streams, %zu bytes\n", en_out[i].c_str(), data.size(),
                            bytes.size());
            }
        }
        write_manifest(en_out[0], "encode", config_text, 0);
        return 0;
    }

    if (de->parsed()) {
        if (de_in.size() != de_out.size())
            throw CLI::ValidationError("decode", "--in and --out must pair up");
        auto parse_streams = [](const std::string& path) {
            const auto bytes = slurp(path);
            std::vector<Bitstream> streams;
            size_t offset = 0;
            while (offset < bytes.size()) streams.push_back(deserialize_bitstream(bytes, offset));
            return streams;
        };
        if (checkpoint_is_multi(de_model)) {
            MultiUserModel model = load_multi_checkpoint(de_model);
            if (static_cast<int>(de_in.size()) != model.n_users)
                throw CLI::ValidationError("decode", "joint model needs one stream file per user");
            std::vector<std::vector<Bitstream>> per_user;
            for (const auto& p : de_in) per_user.push_back(parse_streams(p));
            const size_t count = per_user[0].size();
            for (const auto& s : per_user)
                if (s.size() != count)
                    throw CLI::ValidationError("decode", "stream files must align per scene");
            std::vector<std::vector<ChannelMatrix>> out(per_user.size());
            for (size_t i = 0; i < count; ++i) {
                std::vector<Bitstream> streams;
                for (const auto& s : per_user) streams.push_back(s[i]);
                auto recon = decompress_joint(model, streams);
                for (size_t k = 0; k < recon.size(); ++k) out[k].push_back(std::move(recon[k]));
            }
            for (size_t k = 0; k < out.size(); ++k) {
                for (auto& m : out[k]) m = to_storage_precision(m);
                write_dataset(de_out[k], out[k]);
                std::printf("%s: %zu matrices\n", de_out[k].c_str(), out[k].size());
            }
        } else {
            SingleUserModel model = load_single_checkpoint(de_model);
            for (size_t i = 0; i < de_in.size(); ++i) {
                std::vector<ChannelMatrix> out;
                for (const auto& bs : parse_streams(de_in[i]))
                    out.push_back(to_storage_precision(decompress(model, bs)));
                write_dataset(de_out[i], out);
                std::printf("%s: %zu matrices\n", de_out[i].c_str(), out.size());
            }
        }
        write_manifest(de_out[0], "decode", config_text, 0);
        return 0;
    }

    if (ev->parsed()) {
        EvalResult result;
        if (checkpoint_is_multi(ev_model)) {
            MultiUserModel model = load_multi_checkpoint(ev_model);
            std::vector<std::vector<ChannelMatrix>> per_user;
            for (const auto& p : ev_data) per_user.push_back(read_dataset(p));
            result = evaluate_joint(model, per_user);
            if (ev_series == "single") ev_series = "distributed";
        } else {
            SingleUserModel model = load_single_checkpoint(ev_model);
            result = evaluate(model, read_dataset(ev_data[0]));
        }
        std::printf("rate %.5f bpe (payload %.5f), entropy %.5f bpe, NMSE %.2f dB (%.4g), rho %.4f\n",
                    result.rate_bpe, result.payload_bpe, result.entropy_bpe, result.nmse.db,
                    result.nmse.linear, result.rho);
        for (size_t k = 0; k < result.per_user.size(); ++k)
            std::printf("  user %zu: rate %.5f bpe, NMSE %.2f dB, rho %.4f\n", k,
                        result.per_user[k].rate_bpe, result.per_user[k].nmse.db,
                        result.per_user[k].rho);
        if (!ev_csv.empty()) {
            std::vector<ResultRow> rows;
            if (std::filesystem::exists(ev_csv)) rows = read_results_csv(ev_csv);
            rows.push_back(to_row(ev_series, result));
            write_results_csv(ev_csv, rows);
            write_manifest(ev_csv, "evaluate", config_text, 0);
        }
        if (!ev_json.empty()) {
            nlohmann::json j = {{"rate_bpe", result.rate_bpe},
                                {"payload_bpe", result.payload_bpe},
                                {"entropy_bpe", result.entropy_bpe},
                                {"nmse_db", result.nmse.db},
                                {"nmse_linear", result.nmse.linear},
                                {"rho", result.rho}};
            for (const auto& u : result.per_user)
                j["per_user"].push_back({{"rate_bpe", u.rate_bpe},
                                         {"nmse_db", u.nmse.db},
                                         {"rho", u.rho}});
            dump(ev_json, j.dump(2) + "\n");
        }
        return 0;
    }

    if (cl->parsed()) {
        const auto data = read_dataset(cl_data);
        std::vector<std::pair<double, double>> positions;
        for (const auto& m : data) {
            if (!m.has_position)
                throw std::runtime_error("cluster: dataset carries no user positions");
            positions.push_back({m.pos_x, m.pos_y});
        }
        const auto clusters = cluster_users(positions, cl_threshold);
        nlohmann::json j = nlohmann::json::array();
        for (const auto& c : clusters)
            j.push_back({{"members", c.members},
                         {"centroid", {c.centroid_x, c.centroid_y}},
                         {"size", c.members.size()}});
        std::printf("%s\n", j.dump(2).c_str());
        return 0;
    }

    if (pl->parsed()) {
        std::vector<ResultRow> rows;
        for (const auto& p : pl_csv) {
            const auto part = read_results_csv(p);
            rows.insert(rows.end(), part.begin(), part.end());
        }
        write_rd_svg(pl_svg, rows);
        write_manifest(pl_svg, "plot", config_text, 0);
        std::printf("wrote %s (%zu points)\n", pl_svg.c_str(), rows.size());
        return 0;
    }

    return 1;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
