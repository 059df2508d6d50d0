// concept_probe: command-line front end of the cprobe library.
//
//   concept_probe generate --out DIR [--n 64] [--confound 0]
//   concept_probe train    --dataset DIR --out DIR [--epochs 5]
//   concept_probe concept  --model FILE --dataset DIR --layer NAME --out DIR [--method cav]
//   concept_probe explain  --model FILE --dataset DIR --concept FILE --out DIR [--init full]
//   concept_probe evaluate --model FILE --dataset DIR --concept FILE --out DIR [--layers a,b]
//
// Every subcommand writes run_config.ini (the fully resolved options) into
// its output directory; passing that file back through --config repeats the
// run. Library errors end the process with status 1 and "<ErrorName>: ..."
// on stderr.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cprobe/cprobe.hpp"

namespace fs = std::filesystem;
using namespace cprobe;

namespace {

struct Common {
  std::uint64_t seed = 0;
};

struct GenerateArgs {
  std::string out;
  std::size_t n = 64;
  double confound = 0.0;
  std::string spec_file;
};

struct TrainArgs {
  std::string dataset, out;
  int epochs = 5;
  float lr = 0.05f;
  float momentum = 0.9f;
  std::size_t batch_size = 8;
};

struct ConceptArgs {
  std::string model, dataset, layer, out, concept_name;
  std::string method = "cav";
  double reg = 1e-3;
  int epochs = 1000;
  double tau = 0.005;
};

struct ExplainArgs {
  std::string model, dataset, concept_file, out, composite;
  std::size_t sample = 0;
  std::string init = "full";
  std::vector<std::size_t> classes;
  std::size_t detection = 0;
  std::string projection = "channel";
};

struct EvaluateArgs {
  std::string model, dataset, concept_file, out, composite;
  std::vector<std::string> layers;
  std::string method = "cav";
  std::string init = "full";
  std::string projection = "channel";
  std::string fill = "mean";
  std::vector<double> steps = default_perturbation_steps();
  std::size_t samples = 20;
  std::size_t random_seeds = 5;
};

// Global options, then the section of the subcommand that ran.
void write_run_config(const CLI::App& app, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream os(dir / "run_config.ini");
  for (const CLI::Option* o : app.get_options()) {
    if (o->get_configurable() && o->nonpositional() && o->get_name() != "--config" && o->get_name() != "--help") {
      os << o->get_single_name() << '=' << (o->count() ? o->as<std::string>() : o->get_default_str()) << '\n';
    }
  }
  const CLI::App* sub = app.get_subcommands().front();
  os << '[' << sub->get_name() << "]\n" << sub->config_to_str(true, false);
  if (!os) throw IoError("failed writing " + (dir / "run_config.ini").string());
}

Composite composite_for(const ModelGraph& m, const std::string& file) {
  return file.empty() ? Composite::default_for(m) : Composite::load(file);
}

std::vector<std::size_t> default_classes(const ModelGraph& m) {
  std::vector<std::size_t> out;
  for (std::size_t k = 1; k < m.num_classes(); ++k) out.push_back(k);
  return out;
}

std::string join(const std::vector<double>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ";" : "") << v[i];
  return os.str();
}

void check_stream(const std::ostream& os, const fs::path& p) {
  if (!os) throw IoError("failed writing " + p.string());
}

// ---------------------------------------------------------------------------

void cmd_generate(const CLI::App& app, const Common& c, const GenerateArgs& a) {
  SceneSpec spec = standard_scene_spec(c.seed, a.confound);
  if (!a.spec_file.empty()) {
    std::ifstream is(a.spec_file);
    if (!is) throw IoError("cannot open " + a.spec_file);
    try {
      spec = scene_spec_from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("malformed scene spec: ") + e.what());
    }
  }
  const DatasetHandle h = generate(spec, a.n, a.out);
  write_run_config(app, a.out);
  std::size_t positives = 0;
  for (const auto& e : h.entries) positives += e.concept_label;
  std::cout << "generated " << h.size() << " scenes (" << positives << " with concept '"
            << h.concept_name() << "') in " << a.out << '\n';
  try {
    std::cout << "confound rate " << confound_report(h) << '\n';
  } catch (const UndefinedMetric&) {
    std::cout << "confound rate undefined (class " << spec.confound_class << " absent)\n";
  }
}

void cmd_train(const CLI::App& app, const Common& c, const TrainArgs& a) {
  const DatasetHandle h = load_dataset(a.dataset);
  const auto data = training_examples(h);
  TrainOptions o;
  o.epochs = a.epochs;
  o.lr = a.lr;
  o.momentum = a.momentum;
  o.batch_size = a.batch_size;
  o.seed = c.seed;
  const ModelGraph init = standard_detector(3, h.spec.height, h.spec.width, h.spec.num_classes(), c.seed);
  const TrainResult r = train(init, data, o);

  fs::create_directories(a.out);
  save_model(fs::path(a.out) / "model.cpmd", r.model);
  const fs::path log = fs::path(a.out) / "training.csv";
  std::ofstream os(log);
  os << "epoch,loss\n0," << r.initial_loss << '\n';
  for (std::size_t e = 0; e < r.epoch_losses.size(); ++e) os << e + 1 << ',' << r.epoch_losses[e] << '\n';
  check_stream(os, log);
  write_run_config(app, a.out);
  std::cout << "loss " << r.initial_loss << " -> " << r.epoch_losses.back() << ", cell accuracy "
            << cell_accuracy(r.model, data) << '\n';
}

void cmd_concept(const CLI::App& app, const Common& c, const ConceptArgs& a) {
  const ModelGraph m = load_model(a.model);
  const DatasetHandle h = load_dataset(a.dataset);
  const auto samples = collect_activations(m, a.layer, h);
  const ConceptMethod method = parse_concept_method(a.method);
  ConceptVector cv;
  switch (method) {
    case ConceptMethod::CAV: {
      CavOptions o;
      o.reg = a.reg;
      o.epochs = a.epochs;
      o.seed = c.seed;
      cv = train_cav(samples, o);
      break;
    }
    case ConceptMethod::PatCAV:
    case ConceptMethod::SPatCAV: cv = train_patcav(samples, method == ConceptMethod::SPatCAV); break;
    case ConceptMethod::Net2Vec: {
      Net2VecOptions o;
      o.tau_quantile = a.tau;
      o.seed = c.seed;
      cv = train_net2vec(samples, o);
      break;
    }
  }
  cv.layer = a.layer;
  cv.meta.concept_name = a.concept_name.empty() ? h.concept_name() : a.concept_name;

  fs::create_directories(a.out);
  save_concept(fs::path(a.out) / "concept.cpcv", cv);
  nlohmann::json j = {{"layer", cv.layer},
                      {"method", to_string(cv.method)},
                      {"bias", cv.bias},
                      {"v", std::vector<float>(cv.v.data().begin(), cv.v.data().end())},
                      {"meta", to_json(cv.meta)}};
  const fs::path summary = fs::path(a.out) / "concept.json";
  std::ofstream os(summary);
  os << j.dump(2) << '\n';
  check_stream(os, summary);
  write_run_config(app, a.out);

  std::cout << to_string(cv.method) << " for '" << cv.meta.concept_name << "' at " << cv.layer << ": "
            << cv.meta.score_kind << ' ';
  if (std::isnan(cv.meta.held_out_score)) std::cout << "n/a\n";
  else std::cout << cv.meta.held_out_score << '\n';
  if (cv.meta.precondition_warning) std::cerr << cv.meta.warning << '\n';
}

void cmd_explain(const CLI::App& app, const Common&, const ExplainArgs& a) {
  const ModelGraph m = load_model(a.model);
  const DatasetHandle h = load_dataset(a.dataset);
  const ConceptVector cv = load_concept(a.concept_file);
  if (a.sample >= h.size()) {
    throw IndexError("sample " + std::to_string(a.sample) + " outside dataset of " + std::to_string(h.size()));
  }
  const Tensor x = h.image(a.sample);
  const ForwardResult f = forward(m, x);
  InitRequest req;
  req.mode = parse_init_mode(a.init);
  req.classes = a.classes.empty() ? default_classes(m) : a.classes;
  req.detection = a.detection;
  const auto target = make_init(m, f.output, req);
  if (!target) throw IndexError("no detection in sample " + std::to_string(a.sample));
  const ProjectionMode pm = parse_projection_mode(a.projection);
  const ConceptAttribution att = explain_concept(m, f.trace, composite_for(m, a.composite), cv, *target, pm);

  const fs::path out(a.out);
  export_attribution(att, out);
  render_heatmap(att.input_heatmap, out / "heatmap.ppm");
  write_ppm(out / "input.ppm", read_ppm(h.image_path(a.sample)));
  std::ofstream os(out / "attribution.txt", std::ios::app);
  os << "sample=" << h.entries[a.sample].id << '\n';
  if (const auto loc = try_localization(att.input_heatmap, h.mask(a.sample))) {
    os << "mu_c=" << loc->mu_c << '\n';
  } else {
    os << "mu_c=nan\n";
  }
  check_stream(os, out / "attribution.txt");
  write_run_config(app, out);
  std::cout << "usage ratio " << att.usage_ratio << ", heatmap " << (out / "heatmap.ppm").string() << '\n';
}

// Per-sample record of the faithfulness protocol.
struct SampleEval {
  bool valid = false;
  std::size_t id = 0;
  PerturbationCurve ranked;
  std::vector<PerturbationCurve> random;
};

void cmd_evaluate(const CLI::App& app, const Common& c, const EvaluateArgs& a) {
  const ModelGraph m = load_model(a.model);
  const DatasetHandle h = load_dataset(a.dataset);
  const ConceptVector cv = load_concept(a.concept_file);
  const Composite comp = composite_for(m, a.composite);
  const ProjectionMode pm = parse_projection_mode(a.projection);
  InitRequest req;
  req.mode = parse_init_mode(a.init);
  req.classes = default_classes(m);

  const fs::path out(a.out);
  fs::create_directories(out / "curves");

  // Usage ranking over the whole dataset.
  const auto ranking = rank_by_usage(m, comp, h, cv, req, pm);
  {
    std::ofstream os(out / "usage_ranking.csv");
    os << "rank,sample_id,usage_ratio\n";
    for (std::size_t r = 0; r < ranking.size(); ++r)
      os << r + 1 << ',' << ranking[r].sample_id << ',' << ranking[r].usage_ratio << '\n';
    check_stream(os, out / "usage_ranking.csv");
  }

  // Faithfulness on the first concept samples with a detection.
  std::vector<Tensor> images;
  for (std::size_t i = 0; i < h.size(); ++i) images.push_back(h.image(i));
  PerturbOptions po;
  po.steps = a.steps;
  po.fill = a.fill == "zero" ? FillMode::Zero : FillMode::Mean;
  if (a.fill != "zero" && a.fill != "mean") throw ConfigError("fill must be mean or zero");
  if (po.fill == FillMode::Mean) po.fill_values = channel_means(images);
  po.projection = pm;

  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < h.size() && chosen.size() < a.samples; ++i)
    if (h.entries[i].concept_label) chosen.push_back(i);
  std::vector<SampleEval> evals(chosen.size());
  parallel_for(chosen.size(), [&](std::size_t k) {
    const std::size_t i = chosen[k];
    const ForwardResult f = forward(m, images[i]);
    const auto dets = detect(m, f.output);
    if (dets.empty()) return;
    const Tensor mask = h.mask(i);
    const auto att = explain_concept(m, f.trace, comp, cv, init_single_detection(f.output, dets[0]), pm);
    SampleEval& e = evals[k];
    e.id = h.entries[i].id;
    PerturbOptions local = po;
    local.order = PixelOrder::Ranked;
    e.ranked = perturb_and_score(m, comp, images[i], att.input_heatmap, cv, dets[0], mask, local);
    local.order = PixelOrder::Random;
    for (std::size_t s = 0; s < a.random_seeds; ++s) {
      local.seed = c.seed + s;
      e.random.push_back(perturb_and_score(m, comp, images[i], att.input_heatmap, cv, dets[0], mask, local));
    }
    e.valid = true;
  });

  std::ofstream fs_csv(out / "faithfulness.csv");
  fs_csv << "sample_id,ranked_auc,random_auc,share_first,share_last,mu_c_first,mu_c_last\n";
  double ranked_sum = 0, random_sum = 0;
  std::size_t n_valid = 0, share_up = 0, mu_down = 0, mu_defined = 0;
  for (const SampleEval& e : evals) {
    if (!e.valid) continue;
    const std::string stem = "sample_" + DatasetHandle::file_stem(e.id);
    write_curve_csv(out / "curves" / (stem + "_ranked.csv"), e.ranked, po);
    double random_auc = 0;
    for (std::size_t s = 0; s < e.random.size(); ++s) {
      PerturbOptions tagged = po;
      tagged.seed = c.seed + s;
      write_curve_csv(out / "curves" / (stem + "_random" + std::to_string(s) + ".csv"), e.random[s], tagged);
      random_auc += class_score_auc(e.random[s]) / e.random.size();
    }
    const double ranked_auc = class_score_auc(e.ranked);
    const auto share = concept_share_curve(e.ranked);
    const double mu0 = e.ranked.localization_scores.front(), mu1 = e.ranked.localization_scores.back();
    fs_csv << e.id << ',' << ranked_auc << ',' << random_auc << ',' << share.front() << ',' << share.back()
           << ',' << mu0 << ',' << mu1 << '\n';
    ranked_sum += ranked_auc;
    random_sum += random_auc;
    ++n_valid;
    share_up += share.back() > share.front();
    if (!std::isnan(mu0)) {
      ++mu_defined;
      // An undefined final mu_c means no positive relevance is left anywhere.
      mu_down += std::isnan(mu1) || mu1 < mu0;
    }
  }
  check_stream(fs_csv, out / "faithfulness.csv");

  // Per-layer table: a fresh concept vector per layer, trained on the even
  // entries and scored for localization on the odd concept entries.
  std::vector<std::string> layers = a.layers;
  if (layers.empty()) layers.push_back(cv.layer);
  std::ofstream lt(out / "layers.csv");
  lt << "layer,method,held_out_score,mean_mu_c,localized_samples,mean_usage_ratio\n";
  const ConceptMethod method = parse_concept_method(a.method);
  for (const std::string& layer : layers) {
    std::vector<ConceptSource> train_items, test_items;
    for (std::size_t i = 0; i < h.size(); ++i) {
      ConceptSource s{images[i], h.entries[i].concept_label, h.mask(i)};
      (i % 2 == 0 ? train_items : test_items).push_back(std::move(s));
    }
    const auto samples = collect_activations(m, layer, train_items);
    ConceptVector lv;
    if (method == ConceptMethod::CAV) {
      CavOptions o;
      o.seed = c.seed;
      lv = train_cav(samples, o);
    } else if (method == ConceptMethod::Net2Vec) {
      Net2VecOptions o;
      o.seed = c.seed;
      lv = train_net2vec(samples, o);
    } else {
      lv = train_patcav(samples, method == ConceptMethod::SPatCAV);
    }
    lv.layer = layer;
    std::vector<double> mu(test_items.size(), std::numeric_limits<double>::quiet_NaN());
    std::vector<double> usage(test_items.size(), std::numeric_limits<double>::quiet_NaN());
    parallel_for(test_items.size(), [&](std::size_t k) {
      if (!test_items[k].label) return;
      const ForwardResult f = forward(m, test_items[k].image);
      const auto target = make_init(m, f.output, req);
      if (!target) return;
      const auto att = explain_concept(m, f.trace, comp, lv, *target, pm);
      usage[k] = att.usage_ratio;
      if (const auto loc = try_localization(att.input_heatmap, *test_items[k].mask)) mu[k] = loc->mu_c;
    });
    double mu_sum = 0, usage_sum = 0;
    std::size_t n_mu = 0, n_usage = 0;
    for (std::size_t k = 0; k < mu.size(); ++k) {
      if (!std::isnan(mu[k])) mu_sum += mu[k], ++n_mu;
      if (!std::isnan(usage[k])) usage_sum += usage[k], ++n_usage;
    }
    lt << layer << ',' << to_string(lv.method) << ',' << lv.meta.held_out_score << ','
       << (n_mu ? mu_sum / n_mu : std::nan("")) << ',' << n_mu << ','
       << (n_usage ? usage_sum / n_usage : std::nan("")) << '\n';
  }
  check_stream(lt, out / "layers.csv");

  nlohmann::json summary = {{"samples", n_valid},
                            {"steps", join(a.steps)},
                            {"ranked_auc", n_valid ? ranked_sum / n_valid : 0.0},
                            {"random_auc", n_valid ? random_sum / n_valid : 0.0},
                            {"share_increased", share_up},
                            {"mu_c_decreased", mu_down},
                            {"mu_c_defined", mu_defined}};
  std::ofstream sj(out / "summary.json");
  sj << summary.dump(2) << '\n';
  check_stream(sj, out / "summary.json");
  write_run_config(app, out);
  std::cout << "evaluated " << n_valid << " samples: ranked AUC " << summary["ranked_auc"]
            << ", random AUC " << summary["random_auc"] << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept-level relevance attributions for grid detectors"};
  app.set_config("--config", "", "key=value file with option values");
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--seed", common.seed, "Seed for every random choice")->capture_default_str();

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Render a synthetic concept dataset");
  gen->add_option("--out", ga.out, "Dataset directory")->required();
  gen->add_option("--n", ga.n, "Number of scenes")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--confound", ga.confound, "Probability of a ring touching each disc")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--spec", ga.spec_file, "Scene recipe JSON replacing the standard one");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train the standard grid detector");
  tr->add_option("--dataset", ta.dataset, "Dataset directory")->required();
  tr->add_option("--out", ta.out, "Output directory for model.cpmd")->required();
  tr->add_option("--epochs", ta.epochs)->capture_default_str();
  tr->add_option("--lr", ta.lr)->capture_default_str();
  tr->add_option("--momentum", ta.momentum)->capture_default_str();
  tr->add_option("--batch-size", ta.batch_size)->capture_default_str();

  ConceptArgs ca;
  auto* con = app.add_subcommand("concept", "Fit a concept vector in one layer");
  con->add_option("--model", ca.model)->required();
  con->add_option("--dataset", ca.dataset)->required();
  con->add_option("--layer", ca.layer)->required();
  con->add_option("--out", ca.out, "Output directory for concept.cpcv")->required();
  con->add_option("--method", ca.method, "cav|patcav|spatcav|net2vec")->capture_default_str();
  con->add_option("--concept", ca.concept_name, "Concept name (default: the dataset's)");
  con->add_option("--reg", ca.reg, "CAV L2 weight")->capture_default_str();
  con->add_option("--cav-epochs", ca.epochs, "CAV iterations")->capture_default_str();
  con->add_option("--tau", ca.tau, "Net2Vec activation quantile kept")->capture_default_str();

  ExplainArgs ea;
  auto* ex = app.add_subcommand("explain", "Concept attribution for one sample");
  ex->add_option("--model", ea.model)->required();
  ex->add_option("--dataset", ea.dataset)->required();
  ex->add_option("--concept", ea.concept_file, "concept.cpcv file")->required();
  ex->add_option("--out", ea.out)->required();
  ex->add_option("--sample", ea.sample, "Dataset entry")->capture_default_str();
  ex->add_option("--init", ea.init, "full|classmask|single")->capture_default_str();
  ex->add_option("--classes", ea.classes, "Classes kept by classmask (default: all but background)")
      ->delimiter(',');
  ex->add_option("--detection", ea.detection, "Detection index used by single")->capture_default_str();
  ex->add_option("--project", ea.projection, "channel|orth")->capture_default_str();
  ex->add_option("--composite", ea.composite, "Rule file replacing the default composite");

  EvaluateArgs va;
  auto* ev = app.add_subcommand("evaluate", "Localization, ranking and faithfulness tables");
  ev->add_option("--model", va.model)->required();
  ev->add_option("--dataset", va.dataset)->required();
  ev->add_option("--concept", va.concept_file, "concept.cpcv file")->required();
  ev->add_option("--out", va.out)->required();
  ev->add_option("--layers", va.layers, "Layers of the per-layer table")->delimiter(',');
  ev->add_option("--method", va.method, "Method of the per-layer concept vectors")->capture_default_str();
  ev->add_option("--init", va.init, "Init of ranking and per-layer table")->capture_default_str();
  ev->add_option("--project", va.projection, "channel|orth")->capture_default_str();
  ev->add_option("--fill", va.fill, "mean|zero")->capture_default_str();
  ev->add_option("--steps", va.steps, "Removal fractions")->delimiter(',')->capture_default_str();
  ev->add_option("--samples", va.samples, "Concept samples in the faithfulness curves")->capture_default_str();
  ev->add_option("--random-seeds", va.random_seeds)->capture_default_str();
  ev->add_option("--composite", va.composite, "Rule file replacing the default composite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) cmd_generate(app, common, ga);
    else if (*tr) cmd_train(app, common, ta);
    else if (*con) cmd_concept(app, common, ca);
    else if (*ex) cmd_explain(app, common, ea);
    else if (*ev) cmd_evaluate(app, common, va);
  } catch (const Error& e) {
    std::cerr << e.name() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "Error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
