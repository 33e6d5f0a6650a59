"""Acceptance run: one test per criterion, summarised as PASS/FAIL lines at the end.

Run alone with ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""
import itertools
import time

import numpy as np
import pytest

from tactigrasp.cli import main as cli_main
from tactigrasp.control import ControllerConfig, OracleDetectors, random_feasible_object, run_episode
from tactigrasp.nn import (
    BlockConfig,
    Params,
    divided_block_vjp,
    divided_st_attention,
    init_divided_block,
    init_patch_embed,
    linear_vjp,
    patch_embed_vjp,
    self_attention_vjp,
)
from tactigrasp.sim import GRAVITY, ObjectParams, SimScene, generate_dataset, load_dataset
from tactigrasp.slip import VARIANTS, SlipNetConfig, build_variant, init_slip_params, parameter_count, slip_forward
from tactigrasp.nn import count_parameters
from tactigrasp.tensor import (
    activation_vjp,
    check_gradient,
    conv2d_vjp,
    layer_norm_degenerate,
    layer_norm_vjp,
    matmul_vjp,
    softmax_vjp,
)
from tactigrasp.touch import fold, init_mobilevit_block, mobilevit_block_vjp, unfold
from tactigrasp.train import Model, evaluate, split_indices, train

from oracles import divided_attention_oracle, layer_op, op


def perturbed_divided_block(cfg, seed):
    p = Params()
    init_divided_block(p, cfg, np.random.default_rng(seed))
    noise = np.random.default_rng(seed + 1000)
    for k in p.store:
        p.store[k] = p.store[k] + noise.standard_normal(p.store[k].shape).astype(np.float32) * 0.3
    return p


def test_criterion_1_divided_attention_oracle():
    """divided attention equals the masked dense oracle (1e-5, 50 instances, N*F <= 32, < 10 s)"""
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(50):
        n = int(rng.integers(1, 9))
        f = int(rng.integers(1, 32 // n + 1))
        heads = int(rng.choice([1, 2, 4]))
        cfg = BlockConfig(4 * heads, heads, 8)
        p = perturbed_divided_block(cfg, i)
        x = rng.standard_normal((n * f + 1, cfg.hidden_size)).astype(np.float32)
        got = divided_st_attention(x, p, cfg, n, f)
        want = divided_attention_oracle(x, p.store, n, f, heads, cfg.ln_eps)
        worst = max(worst, float(np.abs(got - want).max()))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-5, worst
    assert elapsed < 10.0, elapsed


def test_criterion_2_key_counts_per_variant():
    """runtime key count per patch query is N+F+2 in every block of every variant; 206 at N=196, F=8"""
    for name in VARIANTS:
        v = build_variant(name)
        cfg = SlipNetConfig.toy(hidden=v.hidden, heads=v.heads, blocks=v.blocks, variant=name)
        seen = []
        clip = np.random.default_rng(0).random((8, 3, 32, 32), dtype=np.float32)
        slip_forward(clip, init_slip_params(cfg), cfg, probe=seen.append)
        assert len(seen) == v.blocks, name
        assert all(s["total"] == cfg.n_patches + cfg.frames + 2 for s in seen), name

    cfg = BlockConfig(8, 2, 16)
    pe = Params()
    init_patch_embed(pe, 3, 16, 8, 196, 8, np.random.default_rng(0))
    grid, _ = patch_embed_vjp(np.zeros((8, 3, 224, 224), np.float32), pe, 16)
    seen = []
    divided_st_attention(grid.tokens, perturbed_divided_block(cfg, 0), cfg, grid.n_patches, grid.frames,
                         probe=seen.append)
    assert seen[0]["total"] == 206


def test_criterion_3_fold_unfold_sweep():
    """fold(unfold(x)) is bit-exact for H, W in {2,4,8,16} and every divisor patch"""
    rng = np.random.default_rng(3)
    sizes = (2, 4, 8, 16)
    for hh, ww in itertools.product(sizes, sizes):
        for h in (d for d in range(1, hh + 1) if hh % d == 0):
            for w in (d for d in range(1, ww + 1) if ww % d == 0):
                x = rng.standard_normal((2, 3, hh, ww)).astype(np.float32)
                assert fold(unfold(x, w, h), hh, ww, w, h).tobytes() == x.tobytes(), (hh, ww, h, w)


def gradient_cases(seed):
    rng = np.random.default_rng(seed)
    f32 = lambda *s: rng.standard_normal(s).astype(np.float32)  # noqa: E731
    b, g, be, w, kb = f32(5, 4), f32(5), f32(5), f32(4, 3, 3, 3), f32(4)
    k, v = f32(6, 5), f32(6, 3)
    lin = Params({"w": f32(5, 4), "b": f32(4)})
    emb = Params()
    init_patch_embed(emb, 2, 2, 3, 4, 2, np.random.default_rng(seed))
    blk_cfg = BlockConfig(8, 2, 16)
    blk = perturbed_divided_block(blk_cfg, seed)
    mv_cfg = BlockConfig.from_ratio(8, 2, 2.0, activation="silu")
    mv = Params()
    init_mobilevit_block(mv, 4, mv_cfg, 2, 3, np.random.default_rng(seed))
    return [
        (op("matmul", lambda x: matmul_vjp(x, b)), f32(3, 5)),
        (op("softmax", lambda x: softmax_vjp(x, -1)), f32(3, 5)),
        (op("layer_norm", lambda x: layer_norm_vjp(x, g, be), 0, layer_norm_degenerate), f32(3, 5)),
        (op("silu", lambda x: activation_vjp(x, "silu")), f32(3, 5)),
        (op("gelu", lambda x: activation_vjp(x, "gelu")), f32(3, 5)),
        (op("conv2d", lambda x: conv2d_vjp(x, w, kb, 2, 1)), f32(3, 6, 6)),
        (op("self_attention", lambda x: (lambda o, _, bk: (o, bk))(*self_attention_vjp(x, k, v))), f32(4, 5)),
        (layer_op("linear", lambda x: linear_vjp(x, lin)), f32(3, 5)),
        (layer_op("patch_embed", lambda x: (lambda gr, bk: (gr.tokens, bk))(*patch_embed_vjp(x, emb, 2))),
         f32(2, 2, 4, 4)),
        (layer_op("divided_block", lambda x: divided_block_vjp(x, blk, blk_cfg, 4, 2)), f32(9, 8)),
        (layer_op("mobilevit_block", lambda x: mobilevit_block_vjp(x, mv, mv_cfg, 2)), f32(4, 8, 8)),
    ]


def test_criterion_4_gradient_checks():
    """primitives, one divided block and one MobileViT block pass finite differences at 1e-2, 3 seeds"""
    failures = []
    for seed in range(3):
        for case, x in gradient_cases(seed):
            err = check_gradient(case, x, seed)
            if not err < 1e-2:
                failures.append((case.name, seed, err))
    assert not failures, failures


TABLE = {
    "baseline": (768, 12, 12), "AB1-384": (384, 12, 12), "AB1-576": (576, 12, 12),
    "AB2-16": (768, 16, 12), "AB2-8": (768, 8, 12), "AB3-8": (768, 12, 8),
    "AB3-6": (768, 12, 6), "AB3-4": (768, 12, 4),
}


def closed_form(hidden, blocks, inter, n, frames=8, patch=16, channels=3, classes=2):
    emb = channels * patch * patch * hidden + hidden + hidden + (n + 1) * hidden + frames * hidden
    per_block = 3 * 2 * hidden + 2 * (4 * hidden * hidden + 4 * hidden) + 2 * hidden * inter + inter + hidden
    return emb + blocks * per_block + 2 * hidden + hidden * classes + classes


def test_criterion_5_variant_registry():
    """all 8 (hidden, heads, blocks) triples exact; parameter counts match the closed form"""
    assert set(VARIANTS) == set(TABLE)
    for name, triple in TABLE.items():
        cfg = build_variant(name)
        assert (cfg.hidden, cfg.heads, cfg.blocks) == triple, name
        assert parameter_count(cfg) == closed_form(cfg.hidden, cfg.blocks, 3078, 196), name
        toy = SlipNetConfig.toy(hidden=cfg.hidden, heads=cfg.heads, blocks=cfg.blocks)
        assert count_parameters(init_slip_params(toy)) == closed_form(
            toy.hidden, toy.blocks, toy.intermediate, toy.n_patches, patch=toy.patch), name


@pytest.mark.slow
@pytest.mark.parametrize("kind,target", [("touch", 0.98), ("slip", 0.90)])
def test_criterion_6_synthetic_learning(kind, target, tmp_path):
    """toy touch >= 0.98 and toy slip >= 0.90 held-out accuracy, 500 samples, <= 5 min training"""
    generate_dataset(kind, tmp_path / "train", 500, seed=42)
    generate_dataset(kind, tmp_path / "test", 200, seed=4242)
    x, y, _ = load_dataset(tmp_path / "train")
    xt, yt, _ = load_dataset(tmp_path / "test")
    model = Model.create(kind)
    tr, va = split_indices(len(x), 0.2, 0)
    t0 = time.perf_counter()
    train(model, x[tr], y[tr], x[va], y[va], epochs=10, batch_size=16, lr=3e-4, seed=0)
    elapsed = time.perf_counter() - t0
    acc = evaluate(model, xt, yt)["accuracy"]
    print(f"{kind}: held-out accuracy {acc:.4f}, training {elapsed:.1f} s")
    assert acc >= target
    assert elapsed <= 300.0


def test_criterion_7_lift_statics():
    """30 random feasible scenes, oracle detectors: all succeed, <= 20 s, final F_n >= m g / mu - one step"""
    cfg = ControllerConfig()
    rng = np.random.default_rng(30)
    for i in range(30):
        obj = random_feasible_object(rng, cfg)
        scene = SimScene(obj=obj, load_angle=float(rng.uniform(0.0, 2 * np.pi)))
        tr = run_episode(scene, OracleDetectors(), cfg, "lift", seed=i)
        assert tr.success, (obj, tr.summary())
        assert tr.duration <= 20.0
        assert tr.final_grip_force >= obj.mass * GRAVITY / obj.friction - cfg.force_step, (obj, tr.summary())


def monotone_between_contact_and_release(tr):
    states = tr.column("state")
    forces = tr.column("force_command")
    start = states.index("Contact")
    end = states.index("Releasing") if "Releasing" in states else len(states)
    seg = forces[start:end]
    return all(b >= a for a, b in zip(seg, seg[1:]))


def test_criterion_8_fluid_scenario():
    """mass doubling: >= 1 Regulating phase, Done, final F_n >= 2 m0 g / mu, monotone force"""
    cfg = ControllerConfig()
    rng = np.random.default_rng(8)
    objs = [ObjectParams(mass=0.2, friction=0.5)] + [
        random_feasible_object(rng, cfg, mass_factor=2.0) for _ in range(9)]
    for i, obj in enumerate(objs):
        tr = run_episode(SimScene(obj=obj), OracleDetectors(), cfg, "fluid", seed=i)
        assert tr.final_state == "Done", (obj, tr.summary())
        assert tr.regulating_phases >= 1
        assert tr.final_grip_force >= 2 * obj.mass * GRAVITY / obj.friction
        assert monotone_between_contact_and_release(tr)


def test_criterion_9_determinism(tmp_path, capsys):
    """gen-data is byte-identical across runs with a fixed seed; episode traces replay identically"""
    for kind in ("touch", "slip"):
        for run in ("a", "b"):
            assert cli_main(["gen-data", "--kind", kind, "--count", "12", "--seed", "5",
                             "--out", str(tmp_path / f"{kind}_{run}")]) == 0
        a = sorted((tmp_path / f"{kind}_a").iterdir())
        b = sorted((tmp_path / f"{kind}_b").iterdir())
        assert [p.name for p in a] == [p.name for p in b]
        assert all(pa.read_bytes() == pb.read_bytes() for pa, pb in zip(a, b))
    for scenario in ("lift", "fluid"):
        for run in ("a", "b"):
            assert cli_main(["episode", "--scenario", scenario, "--seed", "7",
                             "--trace", str(tmp_path / f"{scenario}_{run}.jsonl")]) == 0
        assert (tmp_path / f"{scenario}_a.jsonl").read_bytes() == (tmp_path / f"{scenario}_b.jsonl").read_bytes()
    capsys.readouterr()


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
