#include <fstream>
#include <iostream>
#include <memory>

#include "cli_common.hpp"
#include "secagent/pipeline.hpp"
#include "secagent/text.hpp"

namespace secagent::cli {

namespace {

namespace fs = std::filesystem;

// Directory screenshot paths in `input` are relative to: the image_root of a
// stage manifest written next to it, else the input's own directory.
fs::path image_dir_for(const fs::path& input) {
  const fs::path dir = input.parent_path();
  std::ifstream in(dir / "manifest.json");
  if (!in) return dir;
  const Json m = Json::parse(in, nullptr, false);
  if (!m.is_object() || !m.contains("image_root") || !m["image_root"].is_string()) return dir;
  const fs::path root = m["image_root"].get<std::string>();
  return root.is_absolute() ? root : dir / root;
}

struct PipelineArgs {
  std::string input;
  std::string out;
};

struct FilterArgs : PipelineArgs {
  FilterConfig cfg;
};

// Page records: {"id","app","screenshot","hierarchy":<element>} with an
// optional "screen":[w,h]; the screen defaults to the screenshot size.
int run_filter(const FilterArgs& a) {
  validate_filter_config(a.cfg);
  const fs::path input = a.input;
  const fs::path out = a.out;
  const fs::path root = input.parent_path();
  const auto records = read_jsonl(input);

  PipelineRng rng(a.cfg.rng_seed);
  std::unordered_set<std::uint64_t> seen;
  FilterStats stats;
  std::string lines;
  for (const auto& rec : records) {
    const std::string where = location(input, rec.line);
    std::string page_id, app, screenshot;
    UiElement hierarchy;
    try {
      page_id = rec.value.value("id", "");
      app = rec.value.value("app", "");
      screenshot = rec.value.at("screenshot").get<std::string>();
      hierarchy = ui_element_from_json(rec.value.at("hierarchy"));
    } catch (const Json::exception& e) {
      throw DatasetError(where, e.what());
    }
    RgbImage image;
    try {
      image = read_png(root / screenshot);
    } catch (const ImageError& e) {
      throw DatasetError(where, e.what());
    }
    ScreenSize screen{image.width, image.height};
    if (auto s = rec.value.find("screen"); s != rec.value.end()) {
      if (!s->is_array() || s->size() != 2) throw DatasetError(where, "screen must be [w, h]");
      screen = ScreenSize{(*s)[0].get<int>(), (*s)[1].get<int>()};
    }
    std::vector<UiElement> kept;
    try {
      kept = filter_elements(hierarchy, screen, image, a.cfg, seen, rng, &stats);
    } catch (const CropOutOfBounds& e) {
      throw DatasetError(where, e.what());
    } catch (const std::invalid_argument& e) {
      throw DatasetError(where, e.what());
    }
    for (const auto& el : kept) {
      Json c = Json::object();
      c["page_id"] = page_id;
      c["app"] = app;
      c["screenshot"] = screenshot;
      c["bbox"] = {el.bbox.x_min, el.bbox.y_min, el.bbox.x_max, el.bbox.y_max};
      c["attributes"] = {{"resource_id", el.resource_id},
                         {"text", el.text},
                         {"class", el.class_name},
                         {"clickable", el.clickable}};
      lines += c.dump() + "\n";
    }
  }
  write_text(out / "candidates.jsonl", lines);
  Json manifest = Json::object();
  manifest["stage"] = "filter-grounding";
  manifest["input"] = a.input;
  manifest["image_root"] = relative_to(root, out);
  manifest["seed"] = a.cfg.rng_seed;
  manifest["config"] = {{"min_area", a.cfg.min_area},
                        {"max_aspect", a.cfg.max_aspect},
                        {"max_screen_frac", a.cfg.max_screen_frac},
                        {"uniform_color_var", a.cfg.uniform_color_var},
                        {"seen_keep_prob", a.cfg.seen_keep_prob}};
  manifest["pages"] = records.size();
  manifest["stats"] = stats.to_json();
  write_json(out / "manifest.json", manifest);
  std::cout << "kept " << stats.kept << " of " << stats.leaves << " leaves\n";
  return kExitOk;
}

std::vector<std::pair<int, GroundingSample>> read_grounding(const fs::path& input) {
  std::vector<std::pair<int, GroundingSample>> out;
  for (const auto& rec : read_jsonl(input)) {
    try {
      out.emplace_back(rec.line, grounding_sample_from_json(rec.value));
    } catch (const std::exception& e) {
      throw DatasetError(location(input, rec.line), e.what());
    }
  }
  return out;
}

int run_qc(const PipelineArgs& a) {
  const fs::path input = a.input;
  const fs::path out = a.out;
  std::int64_t total = 0, short_instruction = 0, short_rationale = 0;
  std::string lines;
  for (const auto& [line, g] : read_grounding(input)) {
    ++total;
    const bool instruction_ok = word_count(g.instruction) >= kMinInstructionWords;
    const bool rationale_ok = word_count(g.rationale) >= kMinRationaleWords;
    if (!instruction_ok) ++short_instruction;
    if (!rationale_ok) ++short_rationale;
    if (qc_instruction(g.instruction, g.rationale)) {
      lines += grounding_sample_to_json(g).dump() + "\n";
    }
  }
  write_text(out / "samples.jsonl", lines);
  Json manifest = Json::object();
  manifest["stage"] = "qc";
  manifest["input"] = a.input;
  manifest["image_root"] = relative_to(image_dir_for(input), out);
  manifest["total"] = total;
  manifest["kept"] = static_cast<std::int64_t>(std::count(lines.begin(), lines.end(), '\n'));
  manifest["rejected"] = {{"instruction_too_short", short_instruction},
                          {"rationale_too_short", short_rationale}};
  write_json(out / "manifest.json", manifest);
  std::cout << "kept " << manifest["kept"].get<std::int64_t>() << " of " << total
            << " samples\n";
  return kExitOk;
}

int run_gr2nav(const PipelineArgs& a) {
  const fs::path input = a.input;
  const fs::path out = a.out;
  std::vector<Episode> episodes;
  for (const auto& [line, g] : read_grounding(input)) {
    Episode e = gr2nav(g);
    if (e.id.empty()) e.id = "gr2nav-" + std::to_string(line);
    try {
      validate_episode(e);
    } catch (const DatasetError& err) {
      throw DatasetError(location(input, line), err.what());
    }
    episodes.push_back(std::move(e));
  }
  if (episodes.empty()) throw DatasetError(input.string(), "no grounding samples");
  write_dataset(out, episodes, relative_to(image_dir_for(input), out),
                {{"stage", "gr2nav"}, {"input", a.input}});
  std::cout << "wrote " << episodes.size() << " single-step episodes\n";
  return kExitOk;
}

int run_truncate(const PipelineArgs& a, const std::string& image_root) {
  const fs::path input = a.input;
  const fs::path out = a.out;
  std::vector<Episode> episodes;
  std::int64_t total = 0, untouched = 0, truncated = 0, dropped = 0;
  for (const auto& rec : read_jsonl(input)) {
    ++total;
    const std::string where = location(input, rec.line);
    AnnotatedEpisode annotated;
    try {
      annotated = annotated_episode_from_json(rec.value);
    } catch (const std::exception& e) {
      throw DatasetError(where, e.what());
    }
    try {
      Episode e = truncate_after_first_error(annotated);
      validate_episode(e);
      const bool all_correct =
          std::all_of(annotated.steps.begin(), annotated.steps.end(),
                      [](const AnnotatedStep& s) { return s.correct; });
      if (all_correct) {
        ++untouched;
      } else {
        ++truncated;
      }
      episodes.push_back(std::move(e));
    } catch (const EmptyResult&) {
      ++dropped;
    } catch (const DatasetError& e) {
      throw DatasetError(where, e.what());
    } catch (const ActionError& e) {
      throw DatasetError(where, e.what());
    }
  }
  if (episodes.empty()) throw DatasetError(input.string(), "no episode survives truncation");
  const std::string root =
      image_root.empty() ? relative_to(image_dir_for(input), out) : image_root;
  write_dataset(out, episodes, root,
                {{"stage", "truncate"},
                 {"input", a.input},
                 {"counts",
                  {{"total", total},
                   {"untouched", untouched},
                   {"truncated", truncated},
                   {"dropped_empty", dropped}}}});
  std::cout << "kept " << episodes.size() << " of " << total << " episodes (" << truncated
            << " truncated, " << dropped << " dropped)\n";
  return kExitOk;
}

// Keeps the JSONL records whose `field` survives first-wins dedup. A dataset
// manifest or directory is deduplicated by episode instruction instead.
int run_dedup(const PipelineArgs& a, std::size_t min_distance, const std::string& field) {
  const fs::path input = a.input;
  const fs::path out = a.out;
  if (fs::is_directory(input) || input.filename() == "manifest.json") {
    const Dataset ds = load_dataset(input);
    std::vector<std::string> instructions;
    for (const auto& e : ds.episodes) instructions.push_back(e.instruction);
    std::vector<Episode> kept;
    for (auto i : dedup_instructions(instructions, min_distance)) {
      kept.push_back(ds.episodes[i]);
    }
    write_dataset(out, kept, relative_to(ds.image_root, out),
                  {{"stage", "dedup"},
                   {"input", a.input},
                   {"min_distance", min_distance},
                   {"counts", {{"total", ds.episodes.size()}, {"kept", kept.size()}}}});
    std::cout << "kept " << kept.size() << " of " << ds.episodes.size() << " episodes\n";
    return kExitOk;
  }
  const auto records = read_jsonl(input);
  std::vector<std::string> values;
  for (const auto& rec : records) {
    auto it = rec.value.find(field);
    if (it == rec.value.end() || !it->is_string()) {
      throw DatasetError(location(input, rec.line), "missing string field '" + field + "'");
    }
    values.push_back(it->get<std::string>());
  }
  const auto keep = dedup_instructions(values, min_distance);
  std::string lines;
  for (auto i : keep) lines += records[i].value.dump() + "\n";
  write_text(out / "records.jsonl", lines);
  Json manifest = Json::object();
  manifest["stage"] = "dedup";
  manifest["input"] = a.input;
  manifest["field"] = field;
  manifest["min_distance"] = min_distance;
  manifest["counts"] = {{"total", records.size()}, {"kept", keep.size()}};
  write_json(out / "manifest.json", manifest);
  std::cout << "kept " << keep.size() << " of " << records.size() << " records\n";
  return kExitOk;
}

void add_io(CLI::App* cmd, PipelineArgs& a, const std::string& input_help) {
  cmd->add_option("--input", a.input, input_help)->required();
  cmd->add_option("--out", a.out, "Output directory")->required();
}

}  // namespace

void register_pipeline(CLI::App& app, Runner& runner) {
  auto* pipeline = app.add_subcommand("pipeline", "Data pipeline stages");
  pipeline->require_subcommand(1);

  auto filter = std::make_shared<FilterArgs>();
  auto* f = pipeline->add_subcommand(
      "filter-grounding",
      "Select grounding candidates from page hierarchies.\n"
      "Writes candidates.jsonl and manifest.json with per-reason drop counts.");
  add_io(f, *filter, "Page JSONL: {id, app, screenshot (PNG), hierarchy, screen?}");
  f->add_option("--seed", filter->cfg.rng_seed, "RNG seed")->capture_default_str();
  f->add_option("--min-area", filter->cfg.min_area, "Reject area below (px^2)")
      ->capture_default_str();
  f->add_option("--max-aspect", filter->cfg.max_aspect, "Reject aspect ratio above")
      ->capture_default_str();
  f->add_option("--max-screen-frac", filter->cfg.max_screen_frac,
                "Reject screen coverage above")
      ->capture_default_str();
  f->add_option("--uniform-color-var", filter->cfg.uniform_color_var,
                "Reject when every channel variance is below")
      ->capture_default_str();
  f->add_option("--seen-keep-prob", filter->cfg.seen_keep_prob,
                "Keep probability for repeated elements")
      ->capture_default_str();
  f->callback([filter, &runner] { runner = [filter] { return run_filter(*filter); }; });

  auto qc = std::make_shared<PipelineArgs>();
  auto* q = pipeline->add_subcommand(
      "qc", "Drop grounding samples with short instructions or rationales.");
  add_io(q, *qc, "Grounding JSONL: {id, app, instruction, rationale, screenshot, bbox}");
  q->callback([qc, &runner] { runner = [qc] { return run_qc(*qc); }; });

  auto g2n = std::make_shared<PipelineArgs>();
  auto* g = pipeline->add_subcommand(
      "gr2nav", "Turn grounding samples into single-step click episodes (a dataset).");
  add_io(g, *g2n, "Grounding JSONL");
  g->callback([g2n, &runner] { runner = [g2n] { return run_gr2nav(*g2n); }; });

  auto trunc = std::make_shared<PipelineArgs>();
  auto image_root = std::make_shared<std::string>();
  auto* t = pipeline->add_subcommand(
      "truncate", "Cut annotated episodes after their first incorrect step (a dataset).");
  add_io(t, *trunc, "Annotated episode JSONL (steps carry correct/correction)");
  t->add_option("--image-root", *image_root,
                "image_root written to the manifest (default: taken from the input)");
  t->callback([trunc, image_root, &runner] {
    runner = [trunc, image_root] { return run_truncate(*trunc, *image_root); };
  });

  auto dedup = std::make_shared<PipelineArgs>();
  auto min_distance = std::make_shared<std::size_t>(6);
  auto field = std::make_shared<std::string>("instruction");
  auto* d = pipeline->add_subcommand(
      "dedup", "Remove near-duplicate instructions (code-point Levenshtein, first wins).");
  add_io(d, *dedup, "JSONL records, or a dataset manifest/directory");
  d->add_option("--min-distance", *min_distance, "Minimum edit distance to keep")
      ->capture_default_str();
  d->add_option("--field", *field, "JSONL field holding the instruction")
      ->capture_default_str();
  d->callback([dedup, min_distance, field, &runner] {
    runner = [dedup, min_distance, field] { return run_dedup(*dedup, *min_distance, *field); };
  });
}

}  // namespace secagent::cli
