"""Pipeline orchestration: pretrain, calibrate, search, export, evaluate,
ablate. Stages write their artifacts under one output directory and are
checksum-gated through a run manifest, so re-running a completed stage with
unchanged inputs is a no-op.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
import time

import numpy as np

from . import corpus as corpus_mod
from .archive import read_archive, write_archive
from .config import prune_config
from .diagnostics import estimate_lipschitz, step_size_bound
from .masks import (Mask, budget_from_sparsity, export_nm, save_mask,
                    sparsity_sweep, validate_nm, write_summary_csv)
from .mirror import PruneConfig, run_search, save_search_state
from .model import (ActivationStats, ModelConfig, ToyModel, build_toy_model,
                    collect_activation_stats, freeze_pretrained, load_model,
                    pretrain, save_model, w0_checksum)


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str)
                          .encode()).hexdigest()


class RunManifest:
    """Stage bookkeeping: config snapshot, artifact checksums, timestamps."""

    def __init__(self, out_dir, cfg: dict):
        self.out_dir = out_dir
        self.path = os.path.join(out_dir, "manifest.json")
        os.makedirs(out_dir, exist_ok=True)
        if os.path.exists(self.path):
            with open(self.path) as f:
                self.doc = json.load(f)
            # stage records carry their own input hashes, so a config change
            # only invalidates the stages whose inputs actually moved
            self.doc["config"] = cfg
            self.doc.setdefault("stages", {})
        else:
            self.doc = {"config": cfg, "stages": {}}

    def save(self):
        with open(self.path, "w") as f:
            json.dump(self.doc, f, indent=2)

    def artifact(self, name) -> str:
        return os.path.join(self.out_dir, name)

    def is_current(self, stage: str, inputs_hash: str) -> bool:
        ent = self.doc["stages"].get(stage)
        if not ent or ent.get("status") != "done" or ent.get("inputs_hash") != inputs_hash:
            return False
        for name, sha in ent.get("artifacts", {}).items():
            p = self.artifact(name)
            if not os.path.exists(p) or _sha256_file(p) != sha:
                return False
        return True

    def mark_done(self, stage: str, inputs_hash: str, artifact_names: list[str]):
        self.doc["stages"][stage] = {
            "status": "done",
            "inputs_hash": inputs_hash,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "artifacts": {n: _sha256_file(self.artifact(n)) for n in artifact_names},
        }
        self.save()

    def mark_failed(self, stage: str):
        self.doc["stages"][stage] = {"status": "failed",
                                     "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
        self.save()


def load_or_generate_corpus(cfg: dict, manifest: RunManifest) -> list[str]:
    c = cfg["corpus"]
    if c["path"]:
        if not os.path.exists(c["path"]):
            raise FileNotFoundError(f"missing input: corpus file {c['path']!r}")
        return corpus_mod.read_corpus(c["path"])
    gen = c["generator"]
    docs = corpus_mod.generate_corpus(gen["seed"], gen["docs"], gen["doc_len"])
    corpus_mod.write_corpus(manifest.artifact("corpus.txt"), docs)
    return docs


def build_splits(cfg: dict, docs: list[str]):
    full = corpus_mod.build_sequences(docs, cfg["model"]["context"],
                                      cfg["model"]["vocab"])
    return corpus_mod.split_calibration(full, cfg["corpus"]["heldout_frac"])


def stage_pretrain(cfg: dict, manifest: RunManifest) -> ToyModel:
    docs = load_or_generate_corpus(cfg, manifest)
    inputs_hash = _hash_obj({"model": cfg["model"], "pretrain": cfg["pretrain"],
                             "corpus": cfg["corpus"]})
    out = "model.mdpt"
    if manifest.is_current("pretrain", inputs_hash):
        return load_model(manifest.artifact(out))
    calib, _ = build_splits(cfg, docs)
    model = build_toy_model(ModelConfig(**cfg["model"]))
    p = cfg["pretrain"]
    pretrain(model, calib, p["steps"], p["lr"], p["batch_size"], p["seed"])
    freeze_pretrained(model)
    save_model(manifest.artifact(out), model)
    manifest.mark_done("pretrain", inputs_hash, [out])
    return model


def stage_calibrate(cfg: dict, manifest: RunManifest, model: ToyModel):
    docs = load_or_generate_corpus(cfg, manifest)
    calib, held = build_splits(cfg, docs)
    inputs_hash = _hash_obj({"model": cfg["model"], "corpus": cfg["corpus"]})
    if manifest.is_current("calibrate", inputs_hash):
        load_stats(manifest, model)
        return calib, held
    collect_activation_stats(model, calib)
    tensors = {}
    for name, layer in model.layers.items():
        tensors[name + ".col_norms"] = layer.stats.col_norms
        tensors[name + ".row_sq"] = layer.stats.row_sq
    write_archive(manifest.artifact("stats.mdpt"), tensors,
                  {"sample_count": model.layers[model.layer_names[0]].stats.sample_count})
    manifest.mark_done("calibrate", inputs_hash, ["stats.mdpt"])
    return calib, held


def load_stats(manifest: RunManifest, model: ToyModel) -> None:
    tensors, meta = read_archive(manifest.artifact("stats.mdpt"))
    for name, layer in model.layers.items():
        layer.stats = ActivationStats(col_norms=tensors[name + ".col_norms"],
                                      sample_count=int(meta["sample_count"]),
                                      row_sq=tensors[name + ".row_sq"])


def resolve_alpha(cfg: dict, model: ToyModel, calib) -> float | list:
    """Resolve search.alpha == "auto" to half the theoretical step bound
    from probe-based Lipschitz estimates."""
    if cfg["search"]["alpha"] != "auto":
        return cfg["search"]["alpha"]
    probe_pc = prune_config(cfg, alpha=1.0)
    l_w, l_s = estimate_lipschitz(model, calib, probes=20,
                                  metric=probe_pc.metric)
    return 0.5 * step_size_bound(l_w, l_s, probe_pc.rho, probe_pc.kappa)


def stage_search(cfg: dict, manifest: RunManifest, model: ToyModel, calib
                 ) -> dict[str, np.ndarray]:
    pc = prune_config(cfg, alpha=resolve_alpha(cfg, model, calib))
    inputs_hash = _hash_obj({"search": cfg["search"], "model": cfg["model"],
                             "corpus": cfg["corpus"], "fingerprint": pc.fingerprint()})
    arts = ["gamma.mdpt", "trace.csv", "search_state.mdpt"]
    if manifest.is_current("search", inputs_hash):
        tensors, _ = read_archive(manifest.artifact("gamma.mdpt"))
        return tensors
    before = w0_checksum(model)
    result = run_search(model, calib, pc)
    assert w0_checksum(model) == before, "frozen weights were mutated"
    write_archive(manifest.artifact("gamma.mdpt"), result.gamma_star,
                  {"steps": result.steps_run, "fingerprint": pc.fingerprint()})
    result.trace.to_csv(manifest.artifact("trace.csv"))
    save_search_state(manifest.artifact("search_state.mdpt"), model, pc, pc.steps)
    manifest.mark_done("search", inputs_hash, arts)
    return result.gamma_star


def stage_export(cfg: dict, manifest: RunManifest,
                 gammas: dict[str, np.ndarray]) -> list[tuple[float, Mask, str]]:
    pat = cfg["search"]["pattern"]
    inputs_hash = _hash_obj({"export": cfg["export"], "pattern": pat,
                             "gamma": [float(np.abs(g).sum()) for g in gammas.values()]})
    if pat == "unstructured":
        names = [f"mask_s{int(round(s * 100))}.json"
                 for s in sorted(cfg["export"]["sparsities"], reverse=True)]
        requested = sorted(cfg["export"]["sparsities"], reverse=True)
    else:
        names = [f"mask_{pat[0]}to{pat[1]}.json"]
        requested = [1.0 - pat[0] / pat[1]]
    if manifest.is_current("export", inputs_hash):
        from .masks import load_mask
        return [(s, load_mask(manifest.artifact(n)), n)
                for s, n in zip(requested, names)]
    arts = []
    out = []
    if pat == "unstructured":
        sparsities = sorted(cfg["export"]["sparsities"], reverse=True)
        budgets = [budget_from_sparsity(gammas, s) for s in sparsities]
        masks = sparsity_sweep(gammas, budgets, cfg["export"]["scope"])
        for s, mask in zip(sparsities, masks):
            name = f"mask_s{int(round(s * 100))}.json"
            save_mask(manifest.artifact(name), mask)
            write_summary_csv(manifest.artifact(name.replace(".json", ".csv")), mask)
            arts += [name, name.replace(".json", ".csv")]
            out.append((s, mask, name))
    else:
        n, m = pat
        mask = export_nm(gammas, n, m)
        if not validate_nm(mask, n, m):
            raise RuntimeError("exported mask violates the N:M constraint")
        name = f"mask_{n}to{m}.json"
        save_mask(manifest.artifact(name), mask)
        write_summary_csv(manifest.artifact(f"mask_{n}to{m}.csv"), mask)
        arts += [name, f"mask_{n}to{m}.csv"]
        out.append((1.0 - n / m, mask, name))
    manifest.mark_done("export", inputs_hash, arts)
    return out


def evaluate_perplexity(model: ToyModel, mask: Mask | None, heldout) -> float:
    """exp(mean per-token NLL) under W0 with the mask applied (dense if no
    mask). Never reads the evolved trainable copy."""
    if len(heldout) == 0:
        raise ValueError("held-out set is empty")
    if mask is None:
        weights = "w0"
    else:
        weights = {}
        for name, layer in model.layers.items():
            m = np.asarray(mask.layers[name])
            if m.shape != layer.w0.shape:
                raise ValueError(f"{name}: mask shape {m.shape} != {layer.w0.shape}")
            weights[name] = layer.w0.data * m
    loss, _, _ = model.forward(heldout.sequences, source=weights)
    return float(np.exp(loss.value))


def stage_eval(cfg: dict, manifest: RunManifest, model: ToyModel, heldout,
               exports: list[tuple[float, Mask, str]]) -> list[dict]:
    inputs_hash = _hash_obj({"masks": [name for _, _, name in exports]})
    if manifest.is_current("eval", inputs_hash):
        import csv
        with open(manifest.artifact("report.csv")) as f:
            return list(csv.DictReader(f))
    dense = evaluate_perplexity(model, None, heldout)
    rows = []
    for s, mask, name in exports:
        achieved = mask.sparsity()
        rows.append({
            "pattern": mask.pattern, "requested_sparsity": s,
            "achieved_sparsity": achieved, "kept": mask.kept_count(),
            "total": mask.total(), "ppl": evaluate_perplexity(model, mask, heldout),
            "dense_ppl": dense, "mask_file": name,
        })
    path = manifest.artifact("report.csv")
    _write_rows_csv(path, rows)
    manifest.mark_done("eval", inputs_hash, ["report.csv"])
    return rows


def _write_rows_csv(path, rows: list[dict]):
    import csv
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def run_pipeline(cfg: dict, out_dir: str | None = None):
    out = out_dir or cfg["output"]["dir"]
    manifest = RunManifest(out, cfg)
    stage = "pretrain"
    try:
        model = stage_pretrain(cfg, manifest)
        w0_before = w0_checksum(model)
        stage = "calibrate"
        calib, held = stage_calibrate(cfg, manifest, model)
        stage = "search"
        gammas = stage_search(cfg, manifest, model, calib)
        stage = "export"
        exports = stage_export(cfg, manifest, gammas)
        stage = "eval"
        rows = stage_eval(cfg, manifest, model, held, exports)
    except Exception:
        manifest.mark_failed(stage)
        raise
    assert w0_checksum(model) == w0_before, "frozen weights changed during pipeline"
    manifest.doc["w0_checksum"] = w0_before
    manifest.save()
    return manifest, rows


# ---------------------------------------------------------------------------
# ablations


def train_direct_penalty(model: ToyModel, calib, pc: PruneConfig
                         ) -> dict[str, np.ndarray]:
    """Variant without the dual/prox machinery: descend the task loss plus a
    saliency-magnitude penalty and an L2 term directly on W, then rank by
    |W|. The L2 term stands in for the nonsmooth regularizer."""
    from .saliency import compute_score, score_vjp
    rng = np.random.default_rng(pc.seed)
    alphas = pc.alpha_schedule()
    from .model import task_gradients
    for k in range(pc.steps):
        if pc.batch_size is None or pc.batch_size >= len(calib):
            batch = calib.sequences
        else:
            idx = rng.choice(len(calib), size=pc.batch_size, replace=False)
            batch = calib.sequences[idx]
        _, g_task = task_gradients(model, batch, source="w")
        for name, layer in model.layers.items():
            score = compute_score(layer.w, layer.stats, pc.metric).scores
            g_pen = pc.rho * score_vjp(layer.w, layer.stats, pc.metric, score)
            g_l2 = 2.0 * pc.lam * layer.w
            layer.w = layer.w - pc.kappa * alphas[k] * (g_task[name] + g_pen + g_l2)
            if not np.all(np.isfinite(layer.w)):
                raise RuntimeError(f"direct-penalty training diverged at {name}")
    return {n: np.abs(model.layers[n].w) for n in model.layer_names}


def random_scores(model: ToyModel, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {n: rng.random(model.layers[n].w0.shape) for n in model.layer_names}


def _fresh_search_copy(model: ToyModel) -> ToyModel:
    clone = copy.deepcopy(model)
    for layer in clone.layers.values():
        layer.w = layer.w0.data.copy()
        layer.gamma = np.zeros_like(layer.w)
        layer.v = np.zeros_like(layer.w)
    return clone


def ablation_no_mirror(cfg: dict, model: ToyModel, calib, heldout) -> list[dict]:
    """Side-by-side perplexity: full search vs direct-penalty training vs a
    random ranking, at each export sparsity."""
    sparsities = cfg["export"]["sparsities"]
    scope = cfg["export"]["scope"]
    variants = {}

    m1 = _fresh_search_copy(model)
    pc = prune_config(cfg, alpha=resolve_alpha(cfg, m1, calib))
    variants["mirror"] = run_search(m1, calib, pc).gamma_star

    m2 = _fresh_search_copy(model)
    variants["no-mirror"] = train_direct_penalty(m2, calib, pc)
    variants["random"] = random_scores(model, cfg["search"]["seed"] + 991)

    rows = []
    for vname, scores in variants.items():
        row = {"variant": vname}
        budgets = [budget_from_sparsity(scores, s)
                   for s in sorted(sparsities, reverse=True)]
        masks = sparsity_sweep(scores, budgets, scope)
        for s, mask in zip(sorted(sparsities, reverse=True), masks):
            row[f"ppl@{int(round(s * 100))}"] = evaluate_perplexity(model, mask, heldout)
        rows.append(row)
    return rows


def ablation_metric_sweep(cfg: dict, model: ToyModel, calib, heldout) -> list[dict]:
    from .saliency import METRIC_KINDS
    rows = []
    for kind in METRIC_KINDS:
        c = copy.deepcopy(cfg)
        c["search"]["metric"]["kind"] = kind
        m = _fresh_search_copy(model)
        pc = prune_config(c, alpha=resolve_alpha(c, m, calib))
        gammas = run_search(m, calib, pc).gamma_star
        row = {"metric": kind}
        for s in sorted(cfg["export"]["sparsities"], reverse=True):
            mask = sparsity_sweep(gammas, [budget_from_sparsity(gammas, s)],
                                  cfg["export"]["scope"])[0]
            row[f"ppl@{int(round(s * 100))}"] = evaluate_perplexity(model, mask, heldout)
        rows.append(row)
    return rows
