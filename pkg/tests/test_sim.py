import pytest

from apar.errors import SimulationError
from apar.script import ScriptNode, ScriptTree, flatten_script
from apar.sim import (
    SimConfig,
    StepCostModel,
    config_from_json,
    default_config,
    list_script,
    run_budget_sweep,
    run_simulation,
    step_latency,
)


def constant_cost(t_fixed=0.01):
    return StepCostModel(t_fixed=t_fixed, c_token=0.0, c_attn=0.0)


def long_linear_script(n=400, prompt=("p", "q")):
    return ScriptTree(
        root=0,
        nodes={0: ScriptNode(0, tuple(f"w{i}" for i in range(n)))},
        prompt=prompt,
    )


class TestStepLatency:
    def test_memory_bound_limit(self):
        model = StepCostModel(t_fixed=0.02, c_token=0.0, c_attn=0.0)
        assert step_latency(model, [("s", 100), ("t", 900)]) == pytest.approx(0.02)

    def test_attention_term(self):
        model = StepCostModel(t_fixed=0.0, c_token=0.0, c_attn=1e-6)
        assert step_latency(model, [("s", 1000)]) == pytest.approx(1e-3)

    def test_fewer_attended_is_cheaper(self):
        model = StepCostModel(t_fixed=0.01, c_token=1e-4, c_attn=1e-6)
        assert model.latency(4, 100) < model.latency(4, 200)

    def test_negative_constants_rejected(self):
        with pytest.raises(ValueError):
            StepCostModel(-1.0, 0.0, 0.0)


class TestSingleRequest:
    def test_throughput_is_inverse_step_cost(self):
        script = long_linear_script(400)
        config = SimConfig(
            workload=[script],
            mode="ar",
            capacity_blocks=64,
            cost=constant_cost(0.01),
            sample_period=1.0,
        )
        report = run_simulation(config)
        # 400 content tokens in 401 constant steps
        assert report.summary["throughput"] == pytest.approx(1 / 0.01, rel=0.05)
        assert report.summary["completed"] == 1

    def test_conservation(self):
        workload = [list_script(items=3, detail_len=12) for _ in range(8)]
        config = SimConfig(
            workload=workload, mode="apar", capacity_blocks=48, cost=constant_cost()
        )
        report = run_simulation(config)
        assert report.summary["completed"] == 8
        expected = sum(len(flatten_script(s)) for s in workload)
        assert report.summary["completed_content"] == expected


class TestPoolDiscipline:
    def test_blocks_never_exceed_capacity(self):
        config = SimConfig(
            workload=[list_script() for _ in range(20)],
            mode="apar",
            capacity_blocks=60,
            cost=constant_cost(),
        )
        report = run_simulation(config)
        assert report.summary["peak_blocks"] <= config.effective_blocks
        assert report.summary["completed"] == 20

    def test_preemption_requeues_and_completes(self):
        config = SimConfig(
            workload=[list_script() for _ in range(12)],
            mode="apar",
            capacity_blocks=40,
            cost=constant_cost(),
        )
        report = run_simulation(config)
        assert report.summary["preemptions"] > 0
        assert report.summary["completed"] == 12

    def test_unschedulable_prompt(self):
        script = ScriptTree(
            root=0,
            nodes={0: ScriptNode(0, ("x",))},
            prompt=tuple(f"p{i}" for i in range(64)),
        )
        config = SimConfig(workload=[script], capacity_blocks=4, cost=constant_cost())
        with pytest.raises(SimulationError):
            run_simulation(config)

    def test_single_oversized_request(self):
        config = SimConfig(
            workload=[list_script(items=8, detail_len=60)],
            mode="apar",
            capacity_blocks=8,
            cost=constant_cost(),
        )
        with pytest.raises(SimulationError):
            run_simulation(config)


class TestEarlyReleaseAblation:
    def test_disabling_early_release_raises_peak(self):
        workload = [list_script() for _ in range(6)]
        base = dict(
            workload=workload, mode="apar", capacity_blocks=200, cost=constant_cost()
        )
        with_release = run_simulation(SimConfig(early_release=True, **base))
        without = run_simulation(SimConfig(early_release=False, **base))
        assert without.summary["peak_blocks"] >= with_release.summary["peak_blocks"]


class TestDeterminismAndSweep:
    def test_identical_runs(self):
        config = default_config(mode="apar", copies=12)
        a = run_simulation(config)
        b = run_simulation(default_config(mode="apar", copies=12))
        assert a.to_json() == b.to_json()

    def test_budget_sweep_monotone_steady_throughput(self):
        workload = [
            list_script(
                items=3 + i % 5,
                detail_len=18 + (i * 7) % 25,
                head_len=4 + i % 4,
            )
            for i in range(60)
        ]
        budgets = [0.2, 0.4, 0.6, 0.8]
        for mode in ("apar", "ar"):
            base = SimConfig(workload=workload, mode=mode, concurrency_limit=24)
            reports = run_budget_sweep(base, budgets)
            tputs = [reports[b].summary["steady_throughput"] for b in budgets]
            for lo, hi in zip(tputs, tputs[1:]):
                assert hi >= lo - 1e-9, (mode, tputs)

    def test_latency_nondecreasing_in_concurrency(self):
        # compute-bound model: attention dominates step cost
        cost = StepCostModel(t_fixed=0.001, c_token=0.0, c_attn=5e-5)
        workload = [list_script() for _ in range(30)]
        lat = []
        for limit in (2, 6, 12):
            config = SimConfig(
                workload=workload,
                mode="apar",
                capacity_blocks=800,
                concurrency_limit=limit,
                cost=cost,
            )
            lat.append(run_simulation(config).summary["latency_mean"])
        assert lat[0] <= lat[1] <= lat[2]


class TestConfigIO:
    def test_defaults(self):
        config = default_config()
        assert config.mode == "apar"
        assert len(config.workload) == 100
        assert config.concurrency_limit == 35

    def test_from_json(self):
        text = """
        {"mode": "ar", "cache_budget_fraction": 0.5,
         "capacity_blocks": 128, "concurrency_limit": 10,
         "cost": {"t_fixed": 0.01, "c_token": 0.0, "c_attn": 0.0},
         "workload": {"kind": "list", "count": 3, "items": 4}}
        """
        config = config_from_json(text)
        assert config.mode == "ar"
        assert config.effective_blocks == 64
        assert len(config.workload) == 3

    def test_random_workload(self):
        config = config_from_json(
            '{"workload": {"kind": "random", "count": 5, "seed": 3}}'
        )
        assert len(config.workload) == 5

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            SimConfig(workload=[list_script()], mode="turbo")

    def test_bad_budget(self):
        with pytest.raises(ValueError):
            SimConfig(workload=[list_script()], cache_budget_fraction=0.0)
