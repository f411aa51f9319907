import pytest

from ampgc.errors import ConfigError, TopologyError
from ampgc.topology import (
    AffinityPlan,
    Core,
    CoreTopology,
    CoreType,
    HardwareConfig,
    build_affinity_plan,
    detect_topology,
    dump_topology_text,
    hwt_count,
    hwt_ratio,
    i9_12900k,
    load_topology_file,
    parse_config_name,
    parse_topology_text,
)

TOPO = i9_12900k()


def small_topology(p=4, e=4):
    """p P-cores then e E-cores, modules of four."""
    cores = [Core(i, CoreType.P, (2 * i, 2 * i + 1), 1280) for i in range(p)]
    for j in range(e):
        cores.append(Core(p + j, CoreType.E, (2 * p + j,), 2048, module_id=j // 4))
    return CoreTopology(cores=tuple(cores), l3_kb=8192)


class TestParseConfigName:
    def test_4e(self):
        cfg = parse_config_name("4E")
        assert cfg == HardwareConfig(4, CoreType.E, 4)

    def test_2p(self):
        cfg = parse_config_name("2P")
        assert cfg.gc_core_count == 2
        assert cfg.gc_core_type is CoreType.P
        assert cfg.mutator_pcore_count == 4

    def test_zero_count_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_name("0E")

    @pytest.mark.parametrize("bad", ["", "E", "4", "4X", "E4", "4e", "4P2", "-1P", "4 P"])
    def test_malformed_rejected(self, bad):
        with pytest.raises(ConfigError):
            parse_config_name(bad)

    def test_surrounding_whitespace_tolerated(self):
        assert parse_config_name(" 8E ").name == "8E"

    def test_mutator_count_override(self):
        assert parse_config_name("8E", 2).mutator_pcore_count == 2

    @pytest.mark.parametrize("count", range(1, 9))
    @pytest.mark.parametrize("kind", [CoreType.P, CoreType.E])
    def test_render_parse_round_trip(self, count, kind):
        cfg = HardwareConfig(count, kind)
        assert parse_config_name(cfg.name) == cfg


class TestHwtCount:
    def test_4p_has_8(self):
        assert hwt_count(parse_config_name("4P"), TOPO) == 8

    def test_8e_has_8(self):
        assert hwt_count(parse_config_name("8E"), TOPO) == 8

    def test_2p_has_4(self):
        assert hwt_count(parse_config_name("2P"), TOPO) == 4

    def test_insufficient_cores(self):
        with pytest.raises(TopologyError):
            hwt_count(parse_config_name("9E"), TOPO)

    def test_gc_p_cores_must_not_overlap_mutators(self):
        # 8 P cores minus 4 reserved for mutators leaves room for 4P at most
        with pytest.raises(TopologyError):
            hwt_count(parse_config_name("5P"), TOPO)


class TestHwtRatio:
    def test_2p_vs_4p(self):
        assert hwt_ratio(parse_config_name("2P"), parse_config_name("4P"), TOPO) == (1, 2)

    def test_8e_vs_4p(self):
        assert hwt_ratio(parse_config_name("8E"), parse_config_name("4P"), TOPO) == (1, 1)

    def test_6e_vs_4p_argument_order(self):
        # The reference table prints this pair baseline-first as 4:3; the
        # function itself stays in argument order.
        assert hwt_ratio(parse_config_name("6E"), parse_config_name("4P"), TOPO) == (3, 4)
        assert hwt_ratio(parse_config_name("4P"), parse_config_name("6E"), TOPO) == (4, 3)

    def test_8e_vs_2p_both_directions(self):
        assert hwt_ratio(parse_config_name("8E"), parse_config_name("2P"), TOPO) == (2, 1)
        assert hwt_ratio(parse_config_name("2P"), parse_config_name("8E"), TOPO) == (1, 2)

    @pytest.mark.parametrize("a,b", [("2P", "4P"), ("4E", "4P"), ("6E", "2P"), ("8E", "6E")])
    def test_gcd_reconstruction(self, a, b):
        import math

        ca = hwt_count(parse_config_name(a), TOPO)
        cb = hwt_count(parse_config_name(b), TOPO)
        ra, rb = hwt_ratio(parse_config_name(a), parse_config_name(b), TOPO)
        g = math.gcd(ca, cb)
        assert (ra * g, rb * g) == (ca, cb)
        assert math.gcd(ra, rb) == 1


class TestBuildAffinityPlan:
    def test_8e_on_reference_machine(self):
        plan = build_affinity_plan(parse_config_name("8E"), TOPO)
        assert plan.gc_cpus == frozenset(range(16, 24))
        assert plan.mutator_cpus == frozenset(range(0, 8))

    def test_2p_on_reference_machine(self):
        plan = build_affinity_plan(parse_config_name("2P"), TOPO)
        # mutators take P cores 0..3, GC proceeds with the next two P cores
        assert plan.mutator_cpus == frozenset(range(0, 8))
        assert plan.gc_cpus == frozenset({8, 9, 10, 11})

    def test_6e_fills_whole_modules_first(self):
        plan = build_affinity_plan(parse_config_name("6E"), TOPO)
        assert plan.gc_cpus == frozenset(range(16, 22))

    def test_disjoint_and_within_topology(self):
        for name in ("1E", "4E", "8E", "1P", "2P", "4P"):
            plan = build_affinity_plan(parse_config_name(name), TOPO)
            assert not plan.gc_cpus & plan.mutator_cpus
            assert plan.gc_cpus | plan.mutator_cpus <= set(TOPO.cpu_ids)

    def test_deterministic(self):
        a = build_affinity_plan(parse_config_name("6E"), TOPO)
        b = build_affinity_plan(parse_config_name("6E"), TOPO)
        assert a == b

    def test_capacity_on_small_machine(self):
        topo = small_topology(p=4, e=4)
        plan = build_affinity_plan(parse_config_name("4E"), topo)
        assert len(plan.gc_cpus) == 4
        with pytest.raises(TopologyError):
            build_affinity_plan(parse_config_name("6E"), topo)

    def test_not_enough_mutator_pcores(self):
        topo = small_topology(p=2, e=4)
        with pytest.raises(TopologyError):
            build_affinity_plan(parse_config_name("2E"), topo)
        # but a 2-mutator-core request fits
        plan = build_affinity_plan(parse_config_name("2E", 2), topo)
        assert len(plan.mutator_cpus) == 4

    def test_plan_rejects_overlap(self):
        with pytest.raises(TopologyError):
            AffinityPlan(
                config=parse_config_name("1P"),
                gc_cpus=frozenset({0, 1}),
                mutator_cpus=frozenset({1, 2}),
            )

    def test_plan_rejects_empty_set(self):
        with pytest.raises(TopologyError):
            AffinityPlan(
                config=parse_config_name("1P"),
                gc_cpus=frozenset(),
                mutator_cpus=frozenset({0}),
            )


class TestTopologyInvariants:
    def test_reference_machine_shape(self):
        assert len(TOPO.p_cores) == 8
        assert len(TOPO.e_cores) == 8
        assert len(TOPO.cpu_ids) == 24
        assert all(len(c.hw_thread_ids) == 2 for c in TOPO.p_cores)
        assert all(len(c.hw_thread_ids) == 1 for c in TOPO.e_cores)
        assert all(c.l2_kb == 1280 for c in TOPO.p_cores)
        assert all(c.l2_kb == 2048 for c in TOPO.e_cores)
        assert sorted({c.module_id for c in TOPO.e_cores}) == [0, 1]
        assert TOPO.l3_kb == 30720
        assert TOPO.epb == 15

    def test_duplicate_cpu_rejected(self):
        with pytest.raises(TopologyError):
            CoreTopology(
                cores=(
                    Core(0, CoreType.P, (0, 1), 1280),
                    Core(1, CoreType.P, (1, 2), 1280),
                ),
                l3_kb=1024,
            )

    def test_e_core_needs_module(self):
        with pytest.raises(TopologyError):
            CoreTopology(cores=(Core(0, CoreType.E, (0,), 2048),), l3_kb=1024)

    def test_p_core_must_not_have_module(self):
        with pytest.raises(TopologyError):
            CoreTopology(
                cores=(Core(0, CoreType.P, (0, 1), 1280, module_id=0),), l3_kb=1024
            )

    def test_module_of_five_rejected(self):
        cores = tuple(
            Core(i, CoreType.E, (i,), 2048, module_id=0) for i in range(5)
        )
        with pytest.raises(TopologyError):
            CoreTopology(cores=cores, l3_kb=1024)

    def test_module_l2_mismatch_rejected(self):
        cores = (
            Core(0, CoreType.E, (0,), 2048, module_id=0),
            Core(1, CoreType.E, (1,), 1024, module_id=0),
        )
        with pytest.raises(TopologyError):
            CoreTopology(cores=cores, l3_kb=1024)

    @pytest.mark.parametrize("epb", [-1, 16])
    def test_epb_range(self, epb):
        with pytest.raises(TopologyError):
            CoreTopology(cores=(Core(0, CoreType.P, (0,), 512),), l3_kb=1024, epb=epb)

    def test_epb_bounds_accepted(self):
        for epb in (0, 15, None):
            CoreTopology(cores=(Core(0, CoreType.P, (0,), 512),), l3_kb=1024, epb=epb)


class TestFixtureFormat:
    def test_round_trip_reference_machine(self):
        assert parse_topology_text(dump_topology_text(TOPO)) == TOPO

    def test_round_trip_small(self):
        topo = small_topology(p=2, e=4)
        assert parse_topology_text(dump_topology_text(topo)) == topo

    def test_comments_and_blanks_skipped(self):
        text = "# header\n\n" + dump_topology_text(small_topology(1, 0))
        assert parse_topology_text(text) == small_topology(1, 0)

    def test_missing_l3_rejected(self):
        text = "cpu.0.core = 0\ncore.0.type = P\ncore.0.l2_kb = 512\n"
        with pytest.raises(TopologyError):
            parse_topology_text(text)

    def test_unknown_key_rejected_with_line_number(self):
        with pytest.raises(TopologyError, match="line 1"):
            parse_topology_text("bogus = 3\nl3_kb = 4\n")

    def test_bad_int_rejected(self):
        with pytest.raises(TopologyError, match="line 1"):
            parse_topology_text("l3_kb = big\n")

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(TopologyError):
            load_topology_file(tmp_path / "nope.topo")

    def test_bundled_fixture_matches_builtin(self):
        from importlib.resources import files

        text = (files("ampgc") / "data" / "i9_12900k.topo").read_text()
        assert parse_topology_text(text) == TOPO


def write_sysfs(root, cpus):
    """cpus: list of (cpu_id, kind, core_id, cluster_id, l2, l3)."""
    base = root / "devices" / "system" / "cpu"
    p_list, e_list = [], []
    for cpu, kind, core, cluster, l2, l3 in cpus:
        d = base / f"cpu{cpu}"
        (d / "topology").mkdir(parents=True)
        (d / "topology" / "core_id").write_text(f"{core}\n")
        if cluster is not None:
            (d / "topology" / "cluster_id").write_text(f"{cluster}\n")
        (d / "cache" / "index2").mkdir(parents=True)
        (d / "cache" / "index2" / "size").write_text(l2 + "\n")
        (d / "cache" / "index3").mkdir(parents=True)
        (d / "cache" / "index3" / "size").write_text(l3 + "\n")
        (p_list if kind == "P" else e_list).append(cpu)
    if e_list:
        (root / "devices" / "cpu_core").mkdir(parents=True)
        (root / "devices" / "cpu_core" / "cpus").write_text(
            ",".join(str(c) for c in p_list) + "\n"
        )
        (root / "devices" / "cpu_atom").mkdir(parents=True)
        (root / "devices" / "cpu_atom" / "cpus").write_text(
            f"{min(e_list)}-{max(e_list)}\n"
        )
    return root


class TestDetectTopology:
    def test_hybrid_machine(self, tmp_path):
        spec = [
            (0, "P", 0, None, "1280K", "30M"),
            (1, "P", 0, None, "1280K", "30M"),
            (2, "P", 1, None, "1280K", "30M"),
            (3, "P", 1, None, "1280K", "30M"),
            (4, "E", 0, 7, "2048K", "30M"),
            (5, "E", 1, 7, "2048K", "30M"),
        ]
        write_sysfs(tmp_path, spec)
        (tmp_path / "devices/system/cpu/cpu0/power").mkdir()
        (tmp_path / "devices/system/cpu/cpu0/power/energy_perf_bias").write_text("15\n")
        topo = detect_topology(tmp_path)
        assert len(topo.p_cores) == 2
        assert len(topo.e_cores) == 2
        # renumbered P first, E after; E cores share one module (cluster 7)
        assert [c.id for c in topo.cores] == [0, 1, 2, 3]
        assert all(c.module_id == 0 for c in topo.e_cores)
        assert topo.p_cores[0].hw_thread_ids == (0, 1)
        assert topo.p_cores[0].l2_kb == 1280
        assert topo.l3_kb == 30720
        assert topo.epb == 15

    def test_fractional_megabyte_l2(self, tmp_path):
        spec = [(0, "P", 0, None, "1.25M", "8M")]
        write_sysfs(tmp_path, spec)
        topo = detect_topology(tmp_path)
        assert topo.cores[0].l2_kb == 1280

    def test_homogeneous_machine_all_p(self, tmp_path):
        spec = [(i, "P", i, None, "512K", "8M") for i in range(4)]
        write_sysfs(tmp_path, spec)
        topo = detect_topology(tmp_path)
        assert len(topo.p_cores) == 4
        assert not topo.e_cores
        assert all(c.module_id is None for c in topo.cores)

    def test_e_cores_without_cluster_ids_grouped_by_four(self, tmp_path):
        spec = [(0, "P", 0, None, "512K", "8M")] + [
            (1 + i, "E", 1 + i, None, "2048K", "8M") for i in range(6)
        ]
        write_sysfs(tmp_path, spec)
        topo = detect_topology(tmp_path)
        modules = [c.module_id for c in topo.e_cores]
        assert modules == [0, 0, 0, 0, 1, 1]

    def test_unreadable_root(self, tmp_path):
        with pytest.raises(TopologyError):
            detect_topology(tmp_path / "missing")
