"""Command-line pipeline: frames -> flows -> decomposition -> magnified frames.

Subcommands::

    sparsemag run INPUT_DIR OUTPUT_DIR [options]     full pipeline
    sparsemag dump CONTAINER OUTPUT_DIR [options]    diagnostics from a saved D/G
    sparsemag dewarp INPUT_DIR OUTPUT_DIR [options]  shading-constant sequence
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import io
from .decomp import (DecompParams, build_flow_matrix, decompose, group_norms,
                     reconstruction_error, temporal_sparsity)
from .flowcore import FlowParams, estimate_flow_volume
from .selector import (SelectionParams, component_magnitudes, component_report,
                       select_components)
from .warper import MagnifyParams, dewarped_sequence, magnify_sequence

log = logging.getLogger("sparsemag")

CONTAINER_NAME = "decomposition.dsd"
FLOW_DIR_NAME = "flows"


class PipelineError(Exception):
    """User-facing failure; the message names the offending input."""


@dataclass(frozen=True)
class PipelineConfig:
    input_dir: str
    output_dir: str
    flow_source: str = "estimate"
    flo_dir: str | None = None
    flow_mode: str = "reference"
    K: int = 9
    alpha: float = 0.1
    beta: float = 4.0
    epochs: int = 3
    seed: int = 0
    lambda1: float = 0.1
    lambda2: float = 0.3
    mu: float = 4.0
    diagnostics: bool = False
    baseline_l2: bool = False
    flow_params: FlowParams = FlowParams()

    def __post_init__(self):
        if self.flow_source not in ("estimate", "flo_dir"):
            raise ValueError(f"unknown flow source {self.flow_source!r}")
        if self.flow_source == "flo_dir" and not self.flo_dir:
            raise ValueError("flow_source=flo_dir needs --flo-dir")
        # delegate the numeric checks to the component parameter types
        self.decomp_params()
        self.selection_params()
        MagnifyParams(mu=self.mu, flow_mode=self.flow_mode)

    def decomp_params(self) -> DecompParams:
        mode = "l2" if self.baseline_l2 else "l21"
        return DecompParams(K=self.K, alpha=self.alpha, beta=self.beta, epochs=self.epochs,
                            seed=self.seed, constraint_mode=mode)

    def selection_params(self) -> SelectionParams:
        return SelectionParams(lambda1=self.lambda1, lambda2=self.lambda2)


def load_frames(input_dir):
    paths = io.list_files(input_dir, ".png")
    if len(paths) < 2:
        raise PipelineError(f"{input_dir}: need at least 2 PNG frames, found {len(paths)}")
    frames = []
    for p in paths:
        try:
            img = io.read_png(p)
        except Exception as exc:
            raise PipelineError(f"{p}: cannot read frame ({exc})") from exc
        if frames and img.shape != frames[0].shape:
            raise PipelineError(f"{p}: size {img.shape} differs from {paths[0]} {frames[0].shape}")
        frames.append(img)
    return frames


def load_flows(flo_dir, count, grid):
    paths = io.list_files(flo_dir, ".flo")
    if len(paths) != count:
        raise PipelineError(f"{flo_dir}: expected {count} .flo files, found {len(paths)}")
    flows = []
    for p in paths:
        try:
            fl = io.read_flo(p)
        except (OSError, io.FormatError) as exc:
            raise PipelineError(f"{p}: {exc}") from exc
        if fl.shape[:2] != grid:
            raise PipelineError(f"{p}: flow grid {fl.shape[:2]} does not match frames {grid}")
        flows.append(fl)
    return np.stack(flows)


def obtain_flows(cfg: PipelineConfig, frames):
    grid = frames[0].shape[:2]
    if cfg.flow_source == "flo_dir":
        return load_flows(cfg.flo_dir, len(frames) - 1, grid)
    vol = estimate_flow_volume(frames, cfg.flow_params, mode=cfg.flow_mode)
    cache = os.path.join(cfg.output_dir, FLOW_DIR_NAME)
    os.makedirs(cache, exist_ok=True)
    for t, fl in enumerate(vol, start=1):
        io.write_flo(fl, os.path.join(cache, f"flow_{t:04d}.flo"))
    # continue from what the cache holds so a rerun from the .flo files matches
    return vol.astype(np.float32).astype(np.float64)


def write_frames(frames, output_dir, prefix="out"):
    for t, fr in enumerate(frames, start=1):
        io.write_png(fr, os.path.join(output_dir, f"{prefix}_{t:04d}.png"))


def dump_components(D, G, n1, n2, output_dir, selection: SelectionParams):
    """Write the component report, |d^k(t)| series, sparsity values and G maps."""
    os.makedirs(output_dir, exist_ok=True)
    K = D.shape[1]
    report = component_report(D, G, selection)
    io.write_csv(os.path.join(output_dir, "components.csv"),
                 ["k", "m_k", "peak_time", "c_k", "selected"],
                 [(r.k + 1, r.m_k, r.peak_time, r.c_k, r.selected) for r in report])
    norms = group_norms(D)
    io.write_csv(os.path.join(output_dir, "d_timeseries.csv"),
                 ["t"] + [f"k{k + 1}" for k in range(K)],
                 [(t + 1, *norms[t]) for t in range(norms.shape[0])])
    io.write_csv(os.path.join(output_dir, "temporal_sparsity.csv"),
                 ["k", "temporal_sparsity"],
                 [(k + 1, s) for k, s in enumerate(temporal_sparsity(D))])
    for k in range(K):
        g = np.abs(G[k]).reshape(n1, n2)
        peak = g.max()
        io.write_png16(g / peak if peak > 0 else g, os.path.join(output_dir, f"G_{k + 1}.png"))
    return report


def run_pipeline(cfg: PipelineConfig) -> int:
    os.makedirs(cfg.output_dir, exist_ok=True)
    frames = load_frames(cfg.input_dir)
    n1, n2 = frames[0].shape[:2]
    log.info("loaded %d frames of %dx%d", len(frames), n1, n2)

    vol = obtain_flows(cfg, frames)
    V = build_flow_matrix(vol)
    params = cfg.decomp_params()
    if params.K > min(V.data.shape):
        raise PipelineError(f"K={params.K} too large for {V.T} flow fields of {n1}x{n2}")
    D, G = decompose(V, params)
    io.save_decomposition(os.path.join(cfg.output_dir, CONTAINER_NAME), D, G, n1, n2,
                          params.constraint_mode)

    sel = select_components(component_magnitudes(D, G), cfg.selection_params())
    if not sel:
        log.warning("no component has c_k in [%g, %g]; rendering without magnification",
                    cfg.lambda1, cfg.lambda2)
    else:
        log.info("selected components %s", [k + 1 for k in sel])

    mp = MagnifyParams(mu=cfg.mu, selection=tuple(sel), flow_mode=cfg.flow_mode)
    write_frames(magnify_sequence(frames, vol, D, G, mp), cfg.output_dir)

    if cfg.diagnostics:
        diag = os.path.join(cfg.output_dir, "diagnostics")
        dump_components(D, G, n1, n2, diag, cfg.selection_params())
        with open(os.path.join(diag, "recon_error.txt"), "w") as fh:
            fh.write(f"{reconstruction_error(V, D, G)!r}\n")
    return 0


def _flow_params(args) -> FlowParams:
    return FlowParams(lam=args.flow_lambda, pyramid_levels=args.pyramid_levels,
                      iterations_per_level=args.iterations,
                      warp_updates_per_level=args.warps)


def _add_flow_args(p):
    p.add_argument("--flow-mode", choices=["reference", "consecutive"], default="reference",
                   help="flows from frame 1 (reference) or between neighbours")
    p.add_argument("--flow-source", choices=["estimate", "flo_dir"], default="estimate")
    p.add_argument("--flo-dir", help="directory of precomputed .flo files")
    d = FlowParams()
    p.add_argument("--flow-lambda", type=float, default=d.lam, help="flow smoothness weight")
    p.add_argument("--pyramid-levels", type=int, default=d.pyramid_levels)
    p.add_argument("--iterations", type=int, default=d.iterations_per_level,
                   help="relaxation sweeps per pyramid level")
    p.add_argument("--warps", type=int, default=d.warp_updates_per_level,
                   help="warp updates per pyramid level")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsemag", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="magnify selected micromovements in a PNG sequence")
    run.add_argument("input_dir")
    run.add_argument("output_dir")
    _add_flow_args(run)
    run.add_argument("--k", type=int, default=9, help="number of components")
    run.add_argument("--alpha", type=float, default=0.1, help="sparsity weight on G")
    run.add_argument("--beta", type=float, default=4.0, help="bound on the dictionary columns")
    run.add_argument("--epochs", type=int, default=3)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--lambda1", type=float, default=0.1)
    run.add_argument("--lambda2", type=float, default=0.3, help="upper threshold; 'inf' allowed")
    run.add_argument("--mu", type=float, default=4.0, help="magnification factor")
    run.add_argument("--diagnostics", action="store_true")
    run.add_argument("--baseline-l2", action="store_true",
                     help="unit l2-ball dictionary constraint instead of the l2,1 ball")

    dump = sub.add_parser("dump", help="write diagnostics for a saved decomposition")
    dump.add_argument("container")
    dump.add_argument("output_dir")
    dump.add_argument("--lambda1", type=float, default=0.1)
    dump.add_argument("--lambda2", type=float, default=0.3)

    dew = sub.add_parser("dewarp", help="carry frame 1's colors along the reference flows")
    dew.add_argument("input_dir")
    dew.add_argument("output_dir")
    _add_flow_args(dew)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        if args.command == "run":
            cfg = PipelineConfig(
                input_dir=args.input_dir, output_dir=args.output_dir,
                flow_source=args.flow_source, flo_dir=args.flo_dir, flow_mode=args.flow_mode,
                K=args.k, alpha=args.alpha, beta=args.beta, epochs=args.epochs,
                seed=args.seed, lambda1=args.lambda1, lambda2=args.lambda2, mu=args.mu,
                diagnostics=args.diagnostics, baseline_l2=args.baseline_l2,
                flow_params=_flow_params(args))
            return run_pipeline(cfg)
        if args.command == "dump":
            try:
                D, G, n1, n2, _ = io.load_decomposition(args.container)
            except OSError as exc:
                raise PipelineError(f"{args.container}: {exc.strerror}") from exc
            dump_components(D, G, n1, n2, args.output_dir,
                            SelectionParams(args.lambda1, args.lambda2))
            return 0
        if args.flow_mode != "reference":
            raise PipelineError("dewarp needs reference-mode flows")
        cfg = PipelineConfig(input_dir=args.input_dir, output_dir=args.output_dir,
                             flow_source=args.flow_source, flo_dir=args.flo_dir,
                             flow_params=_flow_params(args))
        os.makedirs(cfg.output_dir, exist_ok=True)
        frames = load_frames(cfg.input_dir)
        write_frames(dewarped_sequence(frames, obtain_flows(cfg, frames)), cfg.output_dir)
        return 0
    except (PipelineError, io.FormatError, ValueError) as exc:
        print(f"sparsemag: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
