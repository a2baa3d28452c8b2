"""The nine acceptance criteria, each at its stated tolerance and time budget."""

import hashlib
import math
import time
from pathlib import Path

import numpy as np

from conftest import record_acceptance
from prefopt import cli, gradcheck
from prefopt import config as configmod
from prefopt import experiment
from prefopt.losses import LossSpec, dpo_critic, grad_weight_profile, loss_dpo, loss_infonce_with_critic
from prefopt.miest import (
    TabularCritic,
    copy_joint,
    exact_cmi,
    independent_joint,
    infonce_exact,
    nwj_exact,
    random_joint,
    train_critic,
)
from prefopt.oracle import brute_force_optimum, optimal_policy
from prefopt.prefdata import LatentReward, PreferenceExample, gen_dataset
from prefopt.seqmodel import TabularPolicy, enumerate_distribution, seq_logprob, space_size

DEMO = Path(__file__).resolve().parents[1] / "configs" / "demo.toml"


def check(number, title, passed, detail, elapsed, budget):
    ok = passed and elapsed < budget
    if elapsed >= budget:
        detail += f"; over the {budget:g} s budget"
    record_acceptance(number, title, ok, detail, elapsed)
    assert ok, detail


def test_1_dpo_infonce_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(1000):
        inst = gradcheck.random_instance("dpo", gradcheck.BACKENDS[i % 2], rng)
        spec = inst.spec.replace(length_normalize=False)
        ex = inst.example
        fw = dpo_critic(spec.beta, inst.policy, inst.ref, ex.prompt, ex.chosen)
        fl = dpo_critic(spec.beta, inst.policy, inst.ref, ex.prompt, ex.rejected)
        diff = abs(loss_dpo(spec, inst.policy, inst.ref, ex).value - loss_infonce_with_critic(fw, fl).value)
        worst = max(worst, diff)
    check(1, "DPO equals InfoNCE with the log-ratio critic", worst <= 1e-12,
          f"max |diff| = {worst:.2e} over 1000 instances", time.perf_counter() - t0, 10)


def test_2_gradient_correctness():
    t0 = time.perf_counter()
    rows = gradcheck.run(100, seed=0)
    worst = max(r.max_rel_err for r in rows)
    check(2, "analytic gradients match central differences", all(r.passed for r in rows) and len(rows) == 14,
          f"max rel err = {worst:.2e} over 100 instances x 7 objectives x 2 backends",
          time.perf_counter() - t0, 60)


def test_3_coefficient_invariance():
    t0 = time.perf_counter()
    ref = TabularPolicy(4, 5, init_scale=1.0, init_seed=4)
    ex = PreferenceExample((1,), (2, 3, 0), (2, 1, 0))
    p_ref = math.exp(seq_logprob(ref, ex.prompt, ex.rejected))
    info = grad_weight_profile(LossSpec("infopo"), ref.copy(), ref, ex, scale_steps=6)
    decades = math.log10(info[0].p_rejected / info[-1].p_rejected)
    spread = max(abs(p.coefficient * p_ref - 1.0) for p in info)
    dpo = grad_weight_profile(LossSpec("dpo", beta=0.01), ref.copy(), ref, ex, scale_steps=6)
    x = np.log([1 / p.p_rejected for p in dpo])
    y = np.log([p.coefficient for p in dpo])
    slope = float(np.polyfit(x, y, 1)[0])
    ok = spread <= 1e-9 and abs(slope - 1.0) <= 0.05 and decades >= 6 - 1e-9
    check(3, "InfoPO rejected coefficient constant, DPO grows as 1/p", ok,
          f"InfoPO rel spread {spread:.1e} over {decades:.1f} decades; DPO log-log slope {slope:.4f} (beta=0.01)",
          time.perf_counter() - t0, 5)


def test_4_mi_bounds():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    joints = [independent_joint(), copy_joint()] + [random_joint(rng, n_y=3, n_x=2) for _ in range(5)]
    excess = -math.inf
    tested = 0
    for j in joints:
        cmi = exact_cmi(j)
        critics = [TabularCritic.zeros(j), TabularCritic.optimal(j)]
        critics += [TabularCritic([3 * rng.standard_normal(t.shape) for t in j.tables]) for _ in range(40)]
        critics += [train_critic(j, b, steps=200, lr=0.5, rng=1)[0] for b in ("nwj", "infonce")]
        for c in critics:
            for value in (nwj_exact(j, c), infonce_exact(j, c, 2), infonce_exact(j, c, 3)):
                excess = max(excess, value - cmi)
                tested += 1
    gaps = []
    for j in (independent_joint(), copy_joint()):
        _, trace = train_critic(j, "nwj", steps=2000, lr=1.0)
        gaps.append(abs(exact_cmi(j) - trace[-1].bound))
        excess = max(excess, max(r.bound for r in trace) - exact_cmi(j))
    ok = excess <= 1e-9 and max(gaps) <= 0.02
    check(4, "variational bounds stay below exact CMI and NWJ is tight", ok,
          f"max bound - CMI = {excess:.2e} over {tested} evaluations; trained NWJ gaps "
          f"{gaps[0]:.4f} (independent), {gaps[1]:.4f} (Y=C)", time.perf_counter() - t0, 30)


def test_5_closed_form_optimum():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        ref = TabularPolicy(3, 2)
        ref.set_row((), (), rng.standard_normal(3))
        seqs = enumerate_distribution(ref, ()).seqs
        reward = LatentReward.from_table(dict(zip(seqs, rng.uniform(-2, 2, 3))))
        beta = float(rng.uniform(0.5, 2.0))
        grid = brute_force_optimum(ref, reward, beta, step=1e-3)
        assert grid.method == "grid"
        worst = max(worst, float(np.max(np.abs(optimal_policy(ref, reward, beta).probs - grid.probs))))
    hand = optimal_policy(TabularPolicy(2, 2), LatentReward.from_table({(0,): math.log(2), (1, 0): 0.0}), 1.0)
    hand_err = float(np.max(np.abs(hand.probs - [2 / 3, 1 / 3])))
    check(5, "closed-form optimal policy matches the grid maximiser", worst <= 2e-3 and hand_err <= 1e-9,
          f"max coordinate gap {worst:.2e} on 20 instances; hand case error {hand_err:.1e}",
          time.perf_counter() - t0, 60)


def test_6_mode_seeking():
    t0 = time.perf_counter()
    exp = experiment.load_experiment("theorem41-tabular")
    assert space_size(exp.reference.vocab_size, exp.reference.max_len) == 8
    steps = exp.train_config.total_steps(len(exp.data))
    res = exp.run()
    kl0, kl1 = res.trajectory.initial.reverse_kl, res.trajectory.final.reverse_kl
    reduction = 1.0 - kl1 / kl0
    target = exp.chosen[()]
    final_top = set(enumerate_distribution(res.policy, ()).top(2))
    modes = set(target.top(2))
    ok = steps <= 2000 and reduction >= 0.9 and final_top == modes
    check(6, "InfoPO concentrates on the two modes of the chosen distribution", ok,
          f"reverse KL {kl0:.4f} -> {kl1:.5f} ({100 * reduction:.1f}% reduction) in {steps} full-batch steps; "
          f"top-2 {'matches' if final_top == modes else 'differs from'} the modes",
          time.perf_counter() - t0, 60)


def test_7_likelihood_dynamics():
    t0 = time.perf_counter()
    cfg = configmod.load("fig12-dynamics")
    assert cfg["seed"] == 7 and cfg["data"]["overlap"] == 0.7 and cfg["data"]["n"] == 2000
    assert cfg["train"]["epochs"] == 5 and cfg["policy"]["vocab_size"] == 16 and cfg["policy"]["max_len"] == 8
    out = {}
    for point in experiment.sweep_points(cfg):
        traj = experiment.build(experiment.point_config(cfg, point)).run().trajectory
        out[point["objective"]] = traj
    d, i = out["dpo"], out["infopo"]
    a = d.final.chosen_avg_logp < d.initial.chosen_avg_logp
    b = i.final.chosen_avg_logp >= i.initial.chosen_avg_logp - 0.05
    dm = {k: t.final.margin - t.initial.margin for k, t in out.items()}
    c = all(v >= 0.2 for v in dm.values())
    check(7, "DPO chosen likelihood falls, InfoPO's holds, both margins grow", a and b and c,
          f"DPO chosen {d.initial.chosen_avg_logp:.3f} -> {d.final.chosen_avg_logp:.3f}; "
          f"InfoPO chosen {i.initial.chosen_avg_logp:.3f} -> {i.final.chosen_avg_logp:.3f}; "
          f"margin gains DPO {dm['dpo']:.3f}, InfoPO {dm['infopo']:.3f}", time.perf_counter() - t0, 300)


def _hash_tree(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != cli.SIDECAR_LOG}


def _run_all_commands(root: Path, capsys) -> dict:
    root.mkdir(parents=True)
    sweep_cfg = root / "sweep.toml"
    sweep_cfg.write_text(DEMO.read_text() + '\n[sweep]\nobjective = ["dpo", "infopo"]\nseed = [1, 2]\n')
    outputs = {}
    assert cli.main(["gen", "--config", str(DEMO), "--out", str(root / "gen"), "--quiet"]) == 0
    assert cli.main(["train", "--config", str(DEMO), "--out", str(root / "train"), "--quiet"]) == 0
    assert cli.main(["sweep", "--config", str(sweep_cfg), "--out", str(root / "sweep"), "--jobs", "2",
                     "--quiet"]) == 0
    runs = sorted(str(p) for p in (root / "sweep").iterdir() if p.is_dir())
    assert cli.main(["report", *runs, "--out", str(root / "report"), "--quiet"]) == 0
    capsys.readouterr()
    assert cli.main(["gradcheck", "--instances", "5"]) == 0
    outputs["gradcheck"] = capsys.readouterr().out
    assert cli.main(["micheck"]) == 0
    outputs["micheck"] = capsys.readouterr().out
    tree = _hash_tree(root)
    tree.update({k: hashlib.sha256(v.encode()).hexdigest() for k, v in outputs.items()})
    return tree


def test_8_determinism(tmp_path, capsys):
    t0 = time.perf_counter()
    first = _run_all_commands(tmp_path / "a", capsys)
    second = _run_all_commands(tmp_path / "b", capsys)
    differ = sorted(k for k in first if first[k] != second.get(k))
    ok = not differ and first.keys() == second.keys()
    with capsys.disabled():
        check(8, "every command reruns to byte-identical artifacts", ok,
              f"{len(first)} artifacts hashed, {len(differ)} differ" + (f": {differ[:3]}" if differ else ""),
              time.perf_counter() - t0, 120)


def test_9_label_statistics():
    t0 = time.perf_counter()
    n = 10_000
    ref = TabularPolicy(4, 5, init_scale=1.0, init_seed=9)
    flat = gen_dataset(ref, LatentReward.feature_linear(np.zeros(4)), n, 0.0, seed=9)
    freq = float(np.mean([ex.first_chosen for ex in flat]))
    se = math.sqrt(0.25 / n)
    star = (1, 0)
    gap = gen_dataset(ref, LatentReward.from_table({star: 50.0}), n, 0.0, seed=10)
    contain = [ex for ex in gap if star in (ex.chosen, ex.rejected)]
    wins = float(np.mean([ex.chosen == star for ex in contain]))
    ok = abs(freq - 0.5) <= 3 * se and wins > 0.999 and len(contain) > 0
    check(9, "Bradley-Terry labels are balanced at zero gap and decisive at gap 50", ok,
          f"first-wins {freq:.4f} ({abs(freq - 0.5) / se:.2f} SE from 0.5); "
          f"gap-50 winner chosen in {100 * wins:.2f}% of {len(contain)} pairs", time.perf_counter() - t0, 10)
