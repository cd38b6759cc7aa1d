// mv3d command-line driver. Each command reads a key=value config (--config) and accepts one
// flag per key: key `n_c` is `--n-c`, and so on.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mv3d/eval/fidelity.hpp"
#include "mv3d/eval/geometry.hpp"
#include "mv3d/eval/report.hpp"
#include "mv3d/model/router.hpp"
#include "mv3d/trainer/config.hpp"
#include "mv3d/trainer/train.hpp"

namespace fs = std::filesystem;
using namespace mv3d;

namespace {

enum class KeyKind { Value, Flag };

struct Key {
  std::string name;
  std::string default_value;
  std::string help;
  KeyKind kind = KeyKind::Value;
};

struct Command {
  std::string name;
  std::string help;
  std::vector<Key> keys;
  std::function<void(const Config&)> run;
};

std::string flag_for(const std::string& key) {
  std::string f = "--" + key;
  std::replace(f.begin(), f.end(), '_', '-');
  return f;
}

Config make_config(const Command& c) {
  ConfigSchema s;
  for (const auto& k : c.keys) s.push_back({k.name, k.default_value, k.help});
  return Config(s);
}

// ---------------------------------------------------------------------------------------------
// Shared helpers

fs::path require_path(const Config& c, const std::string& key) {
  const std::string& v = c.str(key);
  if (v.empty()) throw ConfigError("config key '" + key + "' is required");
  return v;
}

int positive(const Config& c, const std::string& key) {
  const long long v = c.integer(key);
  if (v <= 0) throw ConfigError("config key '" + key + "' must be positive");
  return int(v);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string subject_name(const fs::path& p) {
  fs::path q = p;
  if (q.filename().empty()) q = q.parent_path();
  return q.filename().string();
}

void write_effective_config(const fs::path& dir, const Config& c) {
  fs::create_directories(dir);
  std::ofstream f(dir / "config.txt");
  f << c.dump();
  if (!f) throw IoError("write failed: " + (dir / "config.txt").string());
}

ModelParams<float> load_backbone(const Config& c) {
  return model_from_checkpoint(load_checkpoint(require_path(c, "backbone")), ModelConfig{});
}

LoraConfig lora_config(const Config& c) {
  LoraConfig lc;
  lc.rank = positive(c, "lora_rank");
  lc.alpha = c.real("lora_alpha");
  if (!(lc.alpha > 0)) throw ConfigError("lora_alpha must be positive");
  return lc;
}

int conditioning_count(const Config& c) {
  const long long n = c.integer("n_c");
  if (n < 0 || n > ModelConfig{}.max_views)
    throw ConfigError("n_c must be in [0, " + std::to_string(ModelConfig{}.max_views) + "]");
  return int(n);
}

std::vector<int> parse_prompt(const std::string& text) {
  try {
    return vocab::tokenize(text);
  } catch (const ContractViolation& e) {
    throw ConfigError(std::string("bad prompt: ") + e.what());
  }
}

StageConfig stage_config(const Config& c, Stage stage) {
  StageConfig s;
  s.stage = stage;
  s.iters = int(c.integer("iters"));
  s.lr = c.real("lr");
  s.seed = std::uint64_t(c.integer("seed"));
  s.checkpoint_every = int(c.integer("checkpoint_every"));
  s.out_dir = require_path(c, "out_dir");
  s.validate();
  return s;
}

void check_stage_key(const Config& c, Stage expected) {
  Stage s;
  try {
    s = parse_stage(c.str("stage"));
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  if (s != expected)
    throw ConfigError("stage '" + c.str("stage") + "' does not match this command (expected " + to_string(expected) + ")");
}

/// Runs fn(i) for i in [0, n) on at most `jobs` threads; the first failure by index is rethrown.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min<std::size_t>(std::size_t(std::max(jobs, 1)), n);
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------------------------
// gen-data

void cmd_gen_data(const Config& c) {
  const fs::path out = require_path(c, "out_dir");
  const int views = positive(c, "views"), size = positive(c, "size");
  const std::uint64_t seed = std::uint64_t(c.integer("seed"));
  SceneSpec spec = subject_scene(seed, views, size);
  const std::string bg = c.str("background");
  if (bg == "white") spec.background = Background::White;
  else if (bg == "noise") spec.background = Background::Noise;
  else if (bg != "gradient") throw ConfigError("background must be gradient, white or noise");
  const std::string prompt = subject_prompt_text(spec.object);
  const auto records = render_views(spec);
  write_subject(out, records, prompt, c.boolean("force"));
  std::printf("# mv3d subject manifest\ndir %s\nseed %llu\nviews %d\nsize %d\nbackground %s\nprompt %s\n",
              out.string().c_str(), (unsigned long long)seed, views, size, bg.c_str(), prompt.c_str());
  for (std::size_t i = 0; i < records.size(); ++i)
    std::printf("view %s azimuth %.6g elevation %.6g mask_pixels %zu\n", view_stem(i).c_str(),
                records[i].camera.azimuth_deg, records[i].camera.elevation_deg, records[i].mask_count());
}

// ---------------------------------------------------------------------------------------------
// pretrain

void cmd_pretrain(const Config& c) {
  const std::string stage = c.str("stage");
  const fs::path out = require_path(c, "out_dir");
  const std::string iters = c.str("iters"), lr = c.str("lr");
  if (stage == "backbone") {
    BackboneConfig bc;
    bc.iters = iters == "auto" ? bc.iters : positive(c, "iters");
    bc.lr = lr == "auto" ? bc.lr : c.real("lr");
    bc.seed = std::uint64_t(c.integer("seed"));
    bc.corpus_objects = positive(c, "corpus_objects");
    bc.checkpoint_every = int(c.integer("checkpoint_every"));
    bc.out_dir = out;
    ModelParams<float> theta = c.str("backbone").empty() ? init_model<float>(ModelConfig{}, bc.seed) : load_backbone(c);
    write_effective_config(out, c);
    run_backbone_stage(bc, theta).write_csv(out / "loss.csv");
    return;
  }
  StageConfig sc;
  sc.stage = Stage::Pretrain3Dapter;
  try {
    if (parse_stage(stage) != Stage::Pretrain3Dapter) throw ContractViolation("");
  } catch (const ContractViolation&) {
    throw ConfigError("pretrain stage must be backbone or pretrain_3dapter, got '" + stage + "'");
  }
  sc.iters = iters == "auto" ? 1500 : positive(c, "iters");
  sc.lr = lr == "auto" ? 2e-3 : c.real("lr");
  sc.seed = std::uint64_t(c.integer("seed"));
  sc.checkpoint_every = int(c.integer("checkpoint_every"));
  sc.corpus_objects = positive(c, "corpus_objects");
  sc.out_dir = out;
  sc.validate();
  const LoraConfig lc = lora_config(c);
  const ModelParams<float> theta = load_backbone(c);
  AdapterSet<float> set = init_adapters<float>(theta.config, lc, sc.seed);
  write_effective_config(out, c);
  run_pretrain_stage(sc, theta, set).write_csv(out / "loss.csv");
}

// ---------------------------------------------------------------------------------------------
// train-3db / train-joint

void cmd_train(const Config& c, Stage stage) {
  check_stage_key(c, stage);
  StageConfig sc = stage_config(c, stage);
  sc.n_c = conditioning_count(c);
  const LoraConfig lc = lora_config(c);
  const fs::path data_dir = require_path(c, "dataset_dir");
  std::optional<AdapterSet<float>> pretrained;
  if (stage == Stage::Joint) {
    sc.skip_pretrain = c.boolean("skip_pretrain");
    const std::string ad = c.str("adapters");
    if (sc.skip_pretrain && !ad.empty())
      throw ConfigError("skip_pretrain=true conflicts with a pretrained adapters checkpoint");
    if (!sc.skip_pretrain && ad.empty())
      throw ConfigError("joint stage needs a pretrained 3Dapter (set adapters=... or skip_pretrain=true)");
    if (!ad.empty()) {
      pretrained = adapters_from_checkpoint(load_checkpoint(ad), ModelConfig{});
      if (!pretrained->dapter_pretrained)
        throw ConfigError("adapters checkpoint " + ad + " has no pretrained 3Dapter");
    }
  }
  const ModelParams<float> theta = load_backbone(c);
  const SubjectDataset data = SubjectDataset::load(data_dir, stage == Stage::Joint ? sc.n_c : 0);
  AdapterSet<float> set = init_adapters<float>(theta.config, pretrained ? pretrained->lora : lc, sc.seed);
  if (pretrained) restore_dapter(set, *pretrained);
  write_effective_config(sc.out_dir, c);
  run_subject_stage(sc, theta, set, data).write_csv(sc.out_dir / "loss.csv");
}

// ---------------------------------------------------------------------------------------------
// sample / export-attn share the conditioning setup

struct Conditioning {
  std::optional<AdapterSet<float>> adapters;
  std::vector<Tensor> refs;
  std::vector<int> tags;
  int cond_slots = -1;
  std::optional<SubjectDataset> data;
};

Conditioning conditioning(const Config& c, int exclude_view) {
  Conditioning k;
  const std::string mode = c.str("mode");
  if (mode != "joint" && mode != "3db" && mode != "base") throw ConfigError("mode must be joint, 3db or base");
  const int n_c = conditioning_count(c);
  if (!c.str("dataset_dir").empty()) k.data = SubjectDataset::load(c.str("dataset_dir"), mode == "joint" ? n_c : 0);
  if (mode == "base") return k;
  k.adapters = adapters_from_checkpoint(load_checkpoint(require_path(c, "adapters")), ModelConfig{});
  k.adapters->db_active = true;
  k.adapters->dapter_active = false;
  if (mode == "joint") {
    if (!k.data) throw ConfigError("mode=joint needs dataset_dir for the conditioning views");
    if (exclude_view >= int(k.data->size())) throw ConfigError("view index beyond the subject's views");
    k.data->references_for(exclude_view, k.refs, k.tags);
    k.cond_slots = int(k.data->cond.size());
    k.adapters->dapter_active = !k.refs.empty();
  }
  return k;
}

void cmd_sample(const Config& c) {
  const fs::path out = require_path(c, "out_dir");
  const int frames = positive(c, "frames"), steps = positive(c, "steps");
  const ModelParams<float> theta = load_backbone(c);
  Conditioning k = conditioning(c, int(c.integer("exclude_view")));
  SamplerConfig sc;
  sc.steps = steps;
  sc.frames = frames;
  sc.seed = std::uint64_t(c.integer("seed"));
  sc.refs = k.refs;
  sc.ref_views = k.tags;
  sc.cond_slots = k.cond_slots;
  if (!c.str("prompt").empty()) sc.prompt = parse_prompt(c.str("prompt"));
  else if (k.data) sc.prompt = k.data->prompt;
  else throw ConfigError("sample needs a prompt or a dataset_dir to take it from");
  if (c.boolean("orbit")) sc.prompt = vocab::with_orbit(sc.prompt);
  if (int(sc.prompt.size()) > theta.config.max_text)
    throw ConfigError("prompt longer than " + std::to_string(theta.config.max_text) + " tokens");
  const Tensor video = to_unit_range(sample(theta, k.adapters ? &*k.adapters : nullptr, sc));
  fs::create_directories(out);
  const std::size_t h = video.dim(1), w = video.dim(2), per = h * w * 3;
  for (int f = 0; f < frames; ++f) {
    Tensor img({h, w, 3});
    std::copy_n(video.vec().begin() + std::ptrdiff_t(per * std::size_t(f)), per, img.vec().begin());
    write_png(out / ("frame_" + view_stem(std::size_t(f)) + ".png"), to_image8(img));
  }
}

void cmd_export_attn(const Config& c) {
  const fs::path out = require_path(c, "out_dir");
  const int view = int(c.integer("view"));
  const double t = c.real("t");
  if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("t must be in [0, 1]");
  if (c.str("dataset_dir").empty()) throw ConfigError("config key 'dataset_dir' is required");
  const ModelParams<float> theta = load_backbone(c);
  Conditioning k = conditioning(c, view);
  if (view < 0 || std::size_t(view) >= k.data->size()) throw ConfigError("view index outside the subject's views");
  const Tensor& x = k.data->frames[std::size_t(view)];
  Rng rng(std::uint64_t(c.integer("seed")));
  const Tensor eps = rng.normal_tensor<float>(x.shape());
  Tensor z = x;
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = float((1.0 - t) * x[i] + t * eps[i]);
  AttentionRecord rec;
  predict_velocity(theta, k.adapters ? &*k.adapters : nullptr, z, t, k.refs, k.tags, k.data->prompt, k.cond_slots, &rec);
  fs::create_directories(out);
  write_attention_csv(out / "attention.csv", rec);
  if (k.refs.empty()) return;
  const int block = int(c.integer("block"));
  if (block < -1 || block >= rec.blocks) throw ConfigError("block must be -1 or a block index");
  std::ofstream f(out / "router.csv");
  f << "# version 1\nview,mass\n";
  for (const auto& vm : extract_router_heatmap(rec, block)) f << vm.view << ',' << vm.mass << '\n';
  if (!f) throw IoError("write failed: " + (out / "router.csv").string());
  write_router_pgms(out, rec, theta.config.grid_w(), theta.config.grid_h());
}

// ---------------------------------------------------------------------------------------------
// eval-geom / eval-fid

int jobs_of(const Config& c) { return positive(c, "jobs"); }

void cmd_eval_geom(const Config& c) {
  const fs::path out = require_path(c, "out_dir");
  const auto gens = split_list(c.str("gen_dir")), gts = split_list(c.str("gt_dir"));
  if (gts.empty()) throw ConfigError("config key 'gt_dir' is required");
  if (gens.size() != gts.size()) throw ConfigError("gen_dir and gt_dir list different numbers of subjects");
  GeometryParams gp;
  gp.ransac.seed = std::uint64_t(c.integer("seed"));
  gp.lift_stride = positive(c, "lift_stride");
  const bool ply = c.boolean("export_ply");
  std::vector<MetricsRow> rows(gts.size());
  std::vector<GeometryReport> reports(gts.size());
  std::map<std::string, int> names;
  for (const auto& g : gts)
    if (++names[subject_name(g)] > 1) throw ConfigError("duplicate subject name " + subject_name(g));
  fs::create_directories(out);
  parallel_for(gts.size(), jobs_of(c), [&](std::size_t i) {
    const auto gen = read_subject(gens[i]).views, gt = read_subject(gts[i]).views;
    reports[i] = geometry_pipeline(gen, gt, gp);
    MetricsRow& r = rows[i];
    r.subject = subject_name(gts[i]);
    r.accuracy = reports[i].chamfer.accuracy;
    r.completeness = reports[i].chamfer.completeness;
    r.cd = reports[i].chamfer.cd;
    r.frames = gen.size();
    r.views = gt.size();
    if (ply) {
      write_ply(out / (r.subject + "_gen_aligned.ply"), reports[i].transform.apply(lift_to_pointcloud(gen, gp.lift_stride)));
      write_ply(out / (r.subject + "_gt.ply"), lift_to_pointcloud(gt, gp.lift_stride));
    }
  });
  write_metrics_csv(out / "geometry.csv", rows);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::ofstream f(out / (rows[i].subject + "_stages.csv"));
    f << "# version 1\nstage,residual,detail\n";
    for (const auto& s : reports[i].stages) {
      std::string d = s.detail;
      std::replace(d.begin(), d.end(), ',', ';');
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g", s.residual);
      f << s.stage << ',' << buf << ',' << d << '\n';
    }
    if (!f) throw IoError("write failed in " + out.string());
  }
}

std::vector<Tensor> read_frames(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("frames directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no PNG frames in " + dir.string());
  std::vector<Tensor> out;
  for (const auto& f : files) out.push_back(from_image8(read_png(f, 3)));
  return out;
}

void cmd_eval_fid(const Config& c) {
  const fs::path out = require_path(c, "out_dir");
  const auto frame_dirs = split_list(c.str("frames_dir")), data_dirs = split_list(c.str("dataset_dir"));
  if (frame_dirs.empty()) throw ConfigError("config key 'frames_dir' is required");
  if (frame_dirs.size() != data_dirs.size())
    throw ConfigError("frames_dir and dataset_dir list different numbers of subjects");
  const int n_c = conditioning_count(c);
  if (n_c == 0) throw ConfigError("fidelity needs n_c >= 1 condition views");
  const auto embedder = make_embedder(c.str("embedder"));
  std::map<std::string, int> names;
  for (const auto& g : frame_dirs)
    if (++names[subject_name(g)] > 1) throw ConfigError("duplicate subject name " + subject_name(g));
  std::vector<MetricsRow> rows(frame_dirs.size());
  std::vector<FidelityReport> reports(frame_dirs.size());
  fs::create_directories(out);
  parallel_for(frame_dirs.size(), jobs_of(c), [&](std::size_t i) {
    const SubjectDataset data = SubjectDataset::load(data_dirs[i], n_c);
    std::vector<Tensor> conds;
    for (int v : data.cond) conds.push_back(mask_background(data.images[std::size_t(v)], data.masks[std::size_t(v)]));
    const auto frames = read_frames(frame_dirs[i]);
    reports[i] = max_cosine_fidelity(embed_all(*embedder, frames), embed_all(*embedder, conds), embedder->id());
    rows[i].subject = subject_name(frame_dirs[i]);
    rows[i].fidelity_mean = reports[i].mean;
    rows[i].frames = frames.size();
    rows[i].views = conds.size();
  });
  write_metrics_csv(out / "fidelity.csv", rows);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::ofstream f(out / (rows[i].subject + "_frames.csv"));
    f << "# version 1\nframe,max_cosine\n";
    char buf[32];
    for (std::size_t j = 0; j < reports[i].per_frame.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", reports[i].per_frame[j]);
      f << j << ',' << buf << '\n';
    }
    if (!f) throw IoError("write failed in " + out.string());
  }
}

// ---------------------------------------------------------------------------------------------

std::vector<Key> training_keys(const std::string& stage, const std::string& iters, const std::string& lr) {
  return {{"stage", stage, "stage id"},
          {"iters", iters, "optimizer steps"},
          {"lr", lr, "AdamW learning rate"},
          {"seed", "0", "random seed"},
          {"out_dir", "", "output directory"},
          {"backbone", "", "backbone checkpoint"},
          {"checkpoint_every", "0", "write last_good.mvck every N steps (0: never)"},
          {"lora_rank", "4", "LoRA rank"},
          {"lora_alpha", "8", "LoRA alpha"}};
}

std::vector<Command> commands() {
  std::vector<Command> cmds;
  cmds.push_back({"gen-data", "render a synthetic subject directory",
                  {{"out_dir", "", "subject directory to create"},
                   {"seed", "1", "subject seed"},
                   {"views", "30", "views on the camera ring"},
                   {"size", "16", "frame height and width"},
                   {"background", "gradient", "gradient, white or noise"},
                   {"force", "false", "overwrite a non-empty out_dir", KeyKind::Flag}},
                  cmd_gen_data});
  {
    auto keys = training_keys("pretrain_3dapter", "auto", "auto");
    keys.push_back({"corpus_objects", "1000000", "distinct corpus objects"});
    cmds.push_back({"pretrain", "train the backbone (stage=backbone) or pretrain the 3Dapter", keys, cmd_pretrain});
  }
  {
    auto keys = training_keys("opt_3db_only", "400", "1e-4");
    keys.push_back({"dataset_dir", "", "subject directory"});
    keys.push_back({"n_c", "4", "conditioning views (unused by this stage)"});
    cmds.push_back({"train-3db", "optimize the 3DreamBooth adapters alone", keys,
                    [](const Config& c) { cmd_train(c, Stage::DreamBoothOnly); }});
  }
  {
    auto keys = training_keys("joint", "400", "1e-4");
    keys.push_back({"dataset_dir", "", "subject directory"});
    keys.push_back({"n_c", "4", "conditioning views"});
    keys.push_back({"adapters", "", "pretrained 3Dapter checkpoint"});
    keys.push_back({"skip_pretrain", "false", "start from a randomly initialized 3Dapter", KeyKind::Flag});
    cmds.push_back({"train-joint", "joint multi-view optimization", keys,
                    [](const Config& c) { cmd_train(c, Stage::Joint); }});
  }
  cmds.push_back({"sample", "sample frames with the Euler sampler",
                  {{"backbone", "", "backbone checkpoint"},
                   {"adapters", "", "trained adapters checkpoint"},
                   {"mode", "joint", "joint, 3db or base"},
                   {"dataset_dir", "", "subject directory (conditioning views, prompt)"},
                   {"n_c", "4", "conditioning views"},
                   {"exclude_view", "-1", "drop this view from the conditioning set (-1: keep all)"},
                   {"prompt", "", "prompt text (default: the subject prompt)"},
                   {"orbit", "false", "append the orbit token", KeyKind::Flag},
                   {"frames", "1", "frames T"},
                   {"steps", "16", "Euler steps"},
                   {"seed", "0", "noise seed"},
                   {"out_dir", "", "output directory for frame_NNN.png"}},
                  cmd_sample});
  cmds.push_back({"eval-geom", "Chamfer accuracy/completeness after registration",
                  {{"gen_dir", "", "comma-separated generated subject directories"},
                   {"gt_dir", "", "comma-separated ground-truth subject directories"},
                   {"out_dir", "", "output directory"},
                   {"seed", "0", "RANSAC seed"},
                   {"lift_stride", "1", "pixel stride when lifting depth"},
                   {"export_ply", "false", "write aligned point clouds as PLY", KeyKind::Flag},
                   {"jobs", "1", "subjects evaluated concurrently"}},
                  cmd_eval_geom});
  cmds.push_back({"eval-fid", "max-cosine fidelity against the condition views",
                  {{"frames_dir", "", "comma-separated directories of PNG frames"},
                   {"dataset_dir", "", "comma-separated subject directories, one per frames_dir"},
                   {"n_c", "4", "condition views"},
                   {"embedder", "handcrafted", "handcrafted, clip or dinov2"},
                   {"out_dir", "", "output directory"},
                   {"jobs", "1", "subjects evaluated concurrently"}},
                  cmd_eval_fid});
  cmds.push_back({"export-attn", "dump attention masses and reference heatmaps",
                  {{"backbone", "", "backbone checkpoint"},
                   {"adapters", "", "trained adapters checkpoint"},
                   {"mode", "joint", "joint, 3db or base"},
                   {"dataset_dir", "", "subject directory"},
                   {"n_c", "4", "conditioning views"},
                   {"view", "0", "target view"},
                   {"t", "0.5", "noise level"},
                   {"seed", "0", "noise seed"},
                   {"block", "-1", "block for router.csv (-1: mean over blocks)"},
                   {"out_dir", "", "output directory"}},
                  cmd_export_attn});
  return cmds;
}

int fail(int code, const char* kind, const std::string& msg) {
  std::string m = msg;
  std::replace(m.begin(), m.end(), '\n', ' ');
  std::replace(m.begin(), m.end(), '"', '\'');
  std::fprintf(stderr, "mv3d-error code=%d kind=%s message=\"%s\"\n", code, kind, m.c_str());
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  const auto cmds = commands();
  if (argc > 1 && argv[1][0] != '-' &&
      std::none_of(cmds.begin(), cmds.end(), [&](const Command& c) { return c.name == argv[1]; }))
    return fail(2, "config", std::string("unknown command '") + argv[1] + "'");
  CLI::App app{"mv3d: 3D-aware subject customization on a miniature video DiT"};
  app.require_subcommand(1);
  struct Bound {
    CLI::App* sub;
    std::string config_path;
    std::map<std::string, std::string> values;
    std::map<std::string, bool> flags;
  };
  std::vector<Bound> bound(cmds.size());
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    Bound& b = bound[i];
    b.sub = app.add_subcommand(cmds[i].name, cmds[i].help);
    b.sub->add_option("--config", b.config_path, "key=value config file");
    for (const auto& k : cmds[i].keys) {
      const std::string desc = k.help + " [" + k.name + ", default: " + k.default_value + "]";
      if (k.kind == KeyKind::Flag) b.sub->add_flag(flag_for(k.name), b.flags[k.name], desc);
      else b.sub->add_option(flag_for(k.name), b.values[k.name], desc);
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(2, "config", e.what());
  }
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    const Bound& b = bound[i];
    if (!b.sub->parsed()) continue;
    try {
      Config cfg = make_config(cmds[i]);
      if (!b.config_path.empty()) cfg.load(b.config_path);
      for (const auto& k : cmds[i].keys) {
        if (b.sub->count(flag_for(k.name)) == 0) continue;
        cfg.set(k.name, k.kind == KeyKind::Flag ? (b.flags.at(k.name) ? "true" : "false") : b.values.at(k.name));
      }
      cmds[i].run(cfg);
      return 0;
    } catch (const ConfigError& e) {
      return fail(2, "config", e.what());
    } catch (const ContractViolation& e) {
      return fail(2, "contract", e.what());
    } catch (const NumericFault& e) {
      return fail(3, "numeric", e.what());
    } catch (const DegenerateConfiguration& e) {
      return fail(3, "degenerate", e.what());
    } catch (const IoError& e) {
      return fail(4, "io", e.what());
    } catch (const fs::filesystem_error& e) {
      return fail(4, "io", e.what());
    } catch (const std::exception& e) {
      return fail(1, "internal", e.what());
    }
  }
  return fail(2, "config", "no command given");
}
