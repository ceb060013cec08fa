"""Operator surface: configuration, pipeline orchestration, persistence.

Subcommands: gen-data, train-skinning, meta-sdf, meta-hyper, finetune,
animate, eval, gradcheck, bench-convergence. Exit codes: 2 config error,
3 IO error, 4 numerical failure, 5 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import extract, meta, metrics, nets, oracle, sdfmodel, skinning, synthbody
from .config import RunConfig, load_config
from .errors import AvatarSDFError, ConfigError, MissingArtifact, NonFiniteLoss

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_MISSING = 2, 3, 4, 5


@dataclass
class RunPaths:
    root: Path

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    @property
    def manifest(self) -> Path:
        return self.dataset / "manifest.json"

    @property
    def skinning(self) -> Path:
        return self.root / "skinning"

    @property
    def phi_star(self) -> Path:
        return self.root / "phi_star"

    @property
    def hyper(self) -> Path:
        return self.root / "hyper"

    def finetune(self, subject: str) -> Path:
        return self.root / "finetune" / subject

    def meshes(self, subject: str) -> Path:
        return self.root / "meshes" / subject

    @property
    def reports(self) -> Path:
        return self.root / "reports"


@contextlib.contextmanager
def artifact_lock(root: Path):
    """One writer per artifact directory."""
    root.mkdir(parents=True, exist_ok=True)
    lock = root / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"artifact directory is locked by another process: {lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}; run the upstream command first")
    return path


def _load_manifest(paths: RunPaths):
    return synthbody.load_manifest(_require(paths.manifest, "dataset manifest"))


def _write_csv(path: Path, rows, fieldnames) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, paths: RunPaths, args) -> int:
    manifest = synthbody.generate_dataset(cfg.dataset, paths.dataset)
    print(f"dataset written to {paths.dataset} ({len(manifest.subjects)} subjects)")
    return 0


def cmd_train_skinning(cfg: RunConfig, paths: RunPaths, args) -> int:
    manifest = _load_manifest(paths)
    frames = skinning.prepare_skinning_frames(manifest, cfg.skinning)
    net_inv, net_fwd, _ = skinning.train_skinning(
        frames, cfg.skinning, log_path=paths.skinning / "train_log.csv"
    )
    provenance = {"seed": cfg.seed, "iters": cfg.skinning.iters}
    skinning.save_skinning_net(paths.skinning, net_inv, "inverse", provenance)
    skinning.save_skinning_net(paths.skinning, net_fwd, "forward", provenance)
    print(f"skinning nets written to {paths.skinning}")
    return 0


def cmd_meta_sdf(cfg: RunConfig, paths: RunPaths, args) -> int:
    manifest = _load_manifest(paths)
    frames = meta.meta_frames_from_manifest(manifest)
    spec = cfg.sdf_spec()
    phi_star, log_rows = meta.reptile_sdf(
        frames, spec, cfg.meta_sdf, cfg.igr,
        checkpoint_dir=paths.phi_star / "checkpoints",
        resume=not args.fresh,
        progress=lambda row: print(f"step={row['iteration']} loss={row['loss']:.6f}", flush=True),
    )
    paths.phi_star.mkdir(parents=True, exist_ok=True)
    nets.save_mavp(
        paths.phi_star / "phi_star.mavp",
        nets.ParamVector.from_spec(spec, phi_star),
        {"spec": spec.to_json(), "provenance": {"seed": cfg.seed, "iterations": cfg.meta_sdf.max_iterations}},
    )
    _write_csv(paths.phi_star / "meta_sdf_log.csv", log_rows, ["iteration", "loss"])
    print(f"meta initialization written to {paths.phi_star}")
    return 0


def _load_phi_star(paths: RunPaths, cfg: RunConfig):
    pv, sidecar = nets.load_mavp(_require(paths.phi_star / "phi_star.mavp", "meta field initialization"))
    spec = nets.MLPSpec.from_json(sidecar["spec"])
    return pv.to_f64(), spec


def cmd_meta_hyper(cfg: RunConfig, paths: RunPaths, args) -> int:
    manifest = _load_manifest(paths)
    phi_star, spec = _load_phi_star(paths, cfg)
    frames = meta.meta_frames_from_manifest(manifest)
    by_subject = [
        [f for f in frames if f.subject_idx == si]
        for si in range(len(manifest.meta_subjects()))
    ]
    tree = manifest.meta_subjects()[0].body.tree
    hyper = sdfmodel.HyperNet(spec, cfg.code_dim, cfg.hyper_hidden)
    encoder = sdfmodel.BoneEncoder(cfg.encoder_variant, tree.n_bones, cfg.code_dim)
    psi, enc_params, log_rows = meta.reptile_hyper(
        by_subject, phi_star, spec, hyper, encoder, tree, cfg.meta_hyper, cfg.igr,
        checkpoint_dir=paths.hyper / "checkpoints",
        resume=not args.fresh,
        progress=lambda row: print(f"step={row['iteration']} loss={row['loss']:.6f}", flush=True),
    )
    bundle = sdfmodel.ModelBundle(spec, phi_star, hyper, psi, encoder, enc_params, cfg.igr, tree)
    sdfmodel.save_bundle(paths.hyper, bundle, {"seed": cfg.seed, "epochs": cfg.meta_hyper.epochs})
    _write_csv(paths.hyper / "meta_hyper_log.csv", log_rows, ["iteration", "loss", "subject", "frames"])
    print(f"meta hypernetwork bundle written to {paths.hyper}")
    return 0


def _load_skinning_nets(paths: RunPaths):
    _require(paths.skinning / "inverse_encoder.mavp", "skinning nets")
    net_inv = skinning.load_skinning_net(paths.skinning, "inverse")
    net_fwd = skinning.load_skinning_net(paths.skinning, "forward")
    return net_inv, net_fwd


def _holdout_subjects(manifest, only=None):
    subjects = manifest.holdout_subjects()
    if only:
        subjects = [s for s in subjects if s.name == only]
        if not subjects:
            raise MissingArtifact(f"holdout subject {only!r} not in the dataset")
    return subjects


def canonicalize_subject_frames(manifest, subject, net_inv, net_fwd, threshold_cm, seed):
    """Fine-tune frames for one subject: canonicalized depth clouds."""
    threshold = threshold_cm / 100.0 * manifest.units_per_meter
    frames = []
    for k, rec in enumerate(subject.frames["fine_tune"]):
        fr = synthbody.load_frame(manifest, subject, rec)
        cloud = skinning.canonicalize(
            net_inv, fr.posed, fr.bones, net_fwd, fr.posed_normals,
            threshold=threshold, rng=np.random.default_rng(np.random.SeedSequence([seed, 31, k])),
        )
        frames.append(meta.TrainFrame(0, fr.pose, fr.bones, cloud.points, cloud.normals))
    return frames


def cmd_finetune(cfg: RunConfig, paths: RunPaths, args) -> int:
    manifest = _load_manifest(paths)
    bundle = sdfmodel.load_bundle(_require(paths.hyper / "config.json", "meta hypernetwork bundle").parent)
    net_inv, net_fwd = _load_skinning_nets(paths)
    for subject in _holdout_subjects(manifest, args.subject):
        frames = canonicalize_subject_frames(
            manifest, subject, net_inv, net_fwd, cfg.eval.filter_threshold_cm, cfg.seed
        )
        psi, enc_params, history = meta.fine_tune(
            bundle.psi, bundle.phi_star, bundle.sdf_spec, bundle.hyper, bundle.encoder,
            bundle.enc_params, bundle.tree, frames, cfg.finetune, cfg.igr,
            progress=lambda row: print(f"epoch={row['epoch']} loss={row['loss']:.6f}", flush=True),
        )
        tuned = replace(bundle, psi=psi, enc_params=enc_params)
        out = paths.finetune(subject.name)
        sdfmodel.save_bundle(out, tuned, {"seed": cfg.seed, "subject": subject.name, "epochs": cfg.finetune.epochs})
        _write_csv(
            out / "finetune_log.csv",
            [{"step": i, "loss": v} for i, v in enumerate(history)],
            ["step", "loss"],
        )
        print(f"fine-tuned bundle for {subject.name} written to {out}")
    return 0


def _validation_poses(manifest, subject):
    poses = []
    for rec in subject.frames["validation"]:
        fr = synthbody.load_frame(manifest, subject, rec)
        poses.append(fr.pose)
    return poses


def cmd_animate(cfg: RunConfig, paths: RunPaths, args) -> int:
    manifest = _load_manifest(paths)
    _, net_fwd = _load_skinning_nets(paths)
    for subject in _holdout_subjects(manifest, args.subject):
        bundle_dir = _require(paths.finetune(subject.name) / "config.json", f"fine-tuned bundle for {subject.name}").parent
        bundle = sdfmodel.load_bundle(bundle_dir)
        poses = _validation_poses(manifest, subject)
        report = extract.animate(bundle, poses, cfg.grid, net_fwd, paths.meshes(subject.name), seed=cfg.seed)
        n_ok = sum(1 for f in report["frames"] if f["status"] == "ok")
        print(f"{subject.name}: {n_ok}/{len(report['frames'])} frames animated into {paths.meshes(subject.name)}")
    return 0


def evaluate_subject(cfg: RunConfig, manifest, subject, bundle) -> metrics.EvalReport:
    """Canonical-space metrics over a subject's validation poses."""
    upm = manifest.units_per_meter
    records = subject.frames["validation"]
    if cfg.eval.max_frames:
        records = records[: cfg.eval.max_frames]
    phi_mesh = None
    per_frame, dps, dfs, ncs, eiks = [], [], [], [], []
    for k, rec in enumerate(records):
        fr = synthbody.load_frame(manifest, subject, rec)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 41, k]))
        sample = synthbody.posed_surface_sample(subject.body, subject.style, fr.pose, cfg.eval.n_gt_points, rng)
        gt_field = lambda p: synthbody.canonical_sdf(p, subject.body, fr.pose, subject.style)
        gt_mesh = extract.largest_component(extract.marching_cubes(gt_field, cfg.grid))

        params = bundle.sdf_params(fr.pose, fr.bones)
        mesh = extract.largest_component(extract.marching_cubes(extract.sdf_field(params, bundle.sdf_spec), cfg.grid))
        if phi_mesh is None:
            phi_mesh = extract.largest_component(
                extract.marching_cubes(extract.sdf_field(bundle.phi_star, bundle.sdf_spec), cfg.grid)
            )
        d_p = metrics.point_to_mesh_distance(sample.canonical, mesh, upm)
        d_p_star = metrics.point_to_mesh_distance(sample.canonical, phi_mesh, upm)
        d_f = metrics.face_sampled_distance(gt_mesh, mesh, cfg.eval.samples_per_area, upm, rng)
        nc = metrics.normal_consistency(sample.canonical, sample.canonical_normals, mesh)
        eik = metrics.eikonal_residual(params, bundle.sdf_spec, cfg.eval.eikonal_samples, rng)
        per_frame.append(
            {"frame": k, "D_p_cm": d_p, "D_p_phi_star_cm": d_p_star, "D_f_cm": d_f, "NC": nc, "eikonal": eik}
        )
        dps.append(d_p)
        dfs.append(d_f)
        ncs.append(nc)
        eiks.append(eik)
    report = metrics.EvalReport(
        float(np.mean(dps)),
        float(np.mean(dfs)),
        float(np.mean(ncs)),
        float(np.mean(eiks)),
        per_frame,
        {
            "subject": subject.name,
            "grid": cfg.grid.to_json(),
            "n_gt_points": cfg.eval.n_gt_points,
            "seed": cfg.seed,
            "D_p_phi_star_cm": float(np.mean([f["D_p_phi_star_cm"] for f in per_frame])),
        },
    )
    return report


def cmd_eval(cfg: RunConfig, paths: RunPaths, args) -> int:
    manifest = _load_manifest(paths)
    paths.reports.mkdir(parents=True, exist_ok=True)
    for subject in _holdout_subjects(manifest, args.subject):
        bundle_dir = _require(paths.finetune(subject.name) / "config.json", f"fine-tuned bundle for {subject.name}").parent
        bundle = sdfmodel.load_bundle(bundle_dir)
        report = evaluate_subject(cfg, manifest, subject, bundle)
        out = paths.reports / f"eval_{subject.name}.json"
        out.write_text(json.dumps(report.to_json(), sort_keys=True, indent=2))
        print(
            f"{subject.name}: D_p={report.d_p_cm:.3f}cm D_f={report.d_f_cm:.3f}cm "
            f"NC={report.normal_consistency:.3f} eik={report.eikonal_residual:.3f} -> {out}"
        )
    return 0


def cmd_gradcheck(cfg: RunConfig, paths: RunPaths, args) -> int:
    """Finite-difference oracles against the analytic gradients."""
    rng = np.random.default_rng(cfg.seed)
    failures = 0

    def check(name, rel, tol=1e-3):
        nonlocal failures
        ok = rel < tol
        failures += 0 if ok else 1
        print(f"gradcheck {name}: max_rel={rel:.3e} {'PASS' if ok else 'FAIL'}")

    for trial in range(args.trials):
        spec = nets.MLPSpec.siren(3, (8, 8), 1, omega0=float(rng.uniform(3, 12)))
        theta = nets.init_params(spec, "siren", rng)
        x = rng.uniform(-1, 1, 3)
        g = nets.input_gradient(theta, spec, x)
        g_fd = oracle.fd_gradient(lambda p: float(nets.forward(theta, spec, p)[0]), x, h=1e-5)
        check(f"input_gradient[{trial}]", np.linalg.norm(g - g_fd) / max(np.linalg.norm(g_fd), 1e-12))

        batch = synthbody.SurfaceBatch(
            rng.uniform(-1, 1, (5, 3)) * 0.9,
            _unit(rng.standard_normal((5, 3))),
            rng.uniform(-1, 1, (4, 3)),
            np.tile(np.eye(4), (2, 1, 1)),
        )
        loss, grad = sdfmodel.igr_loss(theta, spec, batch, cfg.igr)
        fd = oracle.fd_gradient(lambda p: sdfmodel.igr_loss_value(p, spec, batch, cfg.igr), theta, h=1e-4)
        check(f"igr_param_grad[{trial}]", np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12))
    if failures:
        raise NonFiniteLoss(f"{failures} gradcheck failures")
    print("gradcheck: all checks passed")
    return 0


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def cmd_bench_convergence(cfg: RunConfig, paths: RunPaths, args) -> int:
    manifest = _load_manifest(paths)
    bundle = sdfmodel.load_bundle(_require(paths.hyper / "config.json", "meta hypernetwork bundle").parent)
    net_inv, net_fwd = _load_skinning_nets(paths)
    subjects = _holdout_subjects(manifest, args.subject)
    paths.reports.mkdir(parents=True, exist_ok=True)
    rows, summary = [], []
    for subject in subjects:
        frames = canonicalize_subject_frames(
            manifest, subject, net_inv, net_fwd, cfg.eval.filter_threshold_cm, cfg.seed
        )
        for s in range(args.seeds):
            ft = replace(cfg.finetune, seed=cfg.seed + 1000 + s)
            init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 51, s]))
            scratch_psi = bundle.hyper.init(init_rng)
            scratch_enc = bundle.encoder.init(init_rng)
            report = metrics.convergence_report(
                {"meta": (bundle.psi, bundle.enc_params), "scratch": (scratch_psi, scratch_enc)},
                bundle.phi_star, bundle.sdf_spec, bundle.hyper, bundle.encoder, bundle.tree,
                frames, ft, cfg.igr,
            )
            m, sc = report.arm("meta"), report.arm("scratch")
            rows.append(
                {
                    "subject": subject.name, "seed": s, "target": report.target,
                    "meta_steps": m.steps_to_target, "scratch_steps": sc.steps_to_target,
                    "meta_reached": m.reached, "scratch_reached": sc.reached,
                }
            )
            summary.append(m.steps_to_target <= 0.5 * sc.steps_to_target)
            print(
                f"{subject.name} seed={s}: meta={m.steps_to_target} scratch={sc.steps_to_target} "
                f"target={report.target:.4f}{'' if sc.reached else ' (target unreached)'}"
            )
    _write_csv(
        paths.reports / "convergence.csv", rows,
        ["subject", "seed", "target", "meta_steps", "scratch_steps", "meta_reached", "scratch_reached"],
    )
    print(f"meta within half the scratch steps in {sum(summary)}/{len(summary)} runs")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-skinning": cmd_train_skinning,
    "meta-sdf": cmd_meta_sdf,
    "meta-hyper": cmd_meta_hyper,
    "finetune": cmd_finetune,
    "animate": cmd_animate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench-convergence": cmd_bench_convergence,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avatarsdf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", choices=["desk", "paper"], help="base preset")
        p.add_argument("--run-dir", help="artifact directory (runs/<name>)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VAL", help="dotted config override")
        p.add_argument("--dry-run", action="store_true", help="validate config and exit without writing")
        p.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
        if name in ("finetune", "animate", "eval", "bench-convergence"):
            p.add_argument("--subject", help="restrict to one holdout subject")
        if name == "gradcheck":
            p.add_argument("--trials", type=int, default=5)
        if name == "bench-convergence":
            p.add_argument("--seeds", type=int, default=5)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.preset, args.set, args.seed, args.run_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), sort_keys=True, indent=2))
        return 0
    paths = RunPaths(Path(cfg.run_dir))
    try:
        with artifact_lock(paths.root):
            return COMMANDS[args.command](cfg, paths, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NonFiniteLoss as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AvatarSDFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
