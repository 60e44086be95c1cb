import json
import math

import numpy as np
import pytest

import clq.clps
from clq.errors import CLQError, ConfigurationError, SearchFailure
from clq.io import load_quantized, save_quantized
from clq.model import Dims, build_toy
from clq.pipeline import (
    FORMAT_VERSION,
    PipelineConfig,
    ablate,
    ablation_csv,
    fp16_payload_bytes,
    packed_payload_bytes,
    run,
    run_many,
)
from clq.quantizer import unpack_codes
from oracles import oracle_codes, oracle_params

SMALL = Dims(dim=16, blocks=2, heads=2, ffn=32, tokens=6, cross_tokens=4)
FAST = dict(calib_batch=3, eval_batch=3, grid_points=4)


@pytest.fixture(scope="module")
def toy():
    return build_toy(SMALL, seed=21)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        PipelineConfig(bits_w=3)
    with pytest.raises(ConfigurationError):
        PipelineConfig(gamma=0.7)
    with pytest.raises(ValueError):
        PipelineConfig(metric="median")
    assert PipelineConfig().resolved_eval_seed == 10_007
    assert (PipelineConfig().beta, PipelineConfig().gamma) == (0.0, 0.01)


def test_sixteen_bit_run_is_near_lossless(toy):
    _, rep = run(toy, PipelineConfig(bits_w=16, bits_a=16, **FAST))
    assert rep.e2e_rel_error < 1e-2


def test_naive_run_equals_independent_minmax(tmp_path, toy):
    cfg = PipelineConfig(enable_cbc=False, enable_obs=False, enable_clps=False, **FAST)
    qm, rep = run(toy, cfg)
    assert rep.label == "naive"
    assert qm.state.rotations == {}
    save_quantized(tmp_path / "q", qm)
    manifest = json.loads((tmp_path / "q" / "manifest.json").read_text())
    blob = (tmp_path / "q" / "packed.bin").read_bytes()
    for entry in manifest["layers"]:
        w = toy.weight64(entry["name"])
        ref = entry["codes"]
        codes = unpack_codes(blob[ref["offset"]:ref["offset"] + ref["nbytes"]], 4, w.size).reshape(w.shape)
        assert np.array_equal(codes, oracle_codes(w, oracle_params(w, 0.0, 1.0, 4))), entry["name"]


def test_run_is_deterministic(tmp_path, toy):
    cfg = PipelineConfig(**FAST)
    digests = []
    for i in range(2):
        qm, rep = run(toy, cfg)
        save_quantized(tmp_path / str(i), qm)
        d = rep.to_dict()
        d.pop("wall_clock_s")
        digests.append(((tmp_path / str(i) / "packed.bin").read_bytes(),
                        (tmp_path / str(i) / "manifest.json").read_text(), json.dumps(d, sort_keys=True)))
    assert digests[0] == digests[1]


def test_report_contents(toy):
    qm, rep = run(toy, PipelineConfig(**FAST))
    assert rep.format_version == FORMAT_VERSION
    assert len(rep.per_layer) == 10 * SMALL.blocks
    assert len(rep.drift) == SMALL.blocks and rep.drift[0] == 0.0
    assert rep.size_ratio == rep.fp16_bytes / rep.packed_bytes
    assert rep.fp16_bytes == 2 * toy.num_params()
    assert qm.state.block_order == [0, 1]
    assert "end-to-end relative error" in rep.table()
    json.dumps(rep.to_dict())


def test_byte_accounting_matches_file(tmp_path, toy):
    qm, _ = run(toy, PipelineConfig(**FAST))
    assert save_quantized(tmp_path / "q", qm) == packed_payload_bytes(qm)
    assert (tmp_path / "q" / "packed.bin").stat().st_size == packed_payload_bytes(qm)


def test_fp16_bytes_formula():
    d = Dims(dim=256, blocks=4, heads=4, ffn=1024)
    assert fp16_payload_bytes(d) == 2 * 4 * (8 * 256 * 256 + 2 * 256 * 1024)


def test_failure_names_layer(toy, monkeypatch):
    def boom(*a, **k):
        raise SearchFailure("every clipping candidate produced non-finite output")

    monkeypatch.setattr(clq.clps, "grid_search", boom)
    with pytest.raises(SearchFailure, match=r"block 0, layer block0\.attn1\.to_q"):
        run(toy, PipelineConfig(**FAST))


def test_ablation_table(toy):
    table = ablate(toy, PipelineConfig(**FAST))
    assert [r["label"] for r in table] == ["naive", "+OBS", "+OBS+CLPS", "+OBS+CLPS+CBC",
                                           "absmax", "percentile", "topk", "range", "par"]
    # the absmax sweep row is the full ladder config, run once
    assert table[4]["e2e_rel_error"] == table[3]["e2e_rel_error"]
    csv = ablation_csv(table)
    assert csv.count("\n") == 10 and csv.startswith("section,label,")


def test_parallel_matches_serial(toy, monkeypatch):
    jobs = [(toy, PipelineConfig(seed=s, **FAST)) for s in range(2)]
    serial = [r.e2e_rel_error for r in run_many(jobs)]
    monkeypatch.setenv("CLQ_THREADS", "2")
    parallel = [r.e2e_rel_error for r in run_many(jobs)]
    assert serial == parallel


def test_bad_thread_env(toy, monkeypatch):
    monkeypatch.setenv("CLQ_THREADS", "many")
    with pytest.raises(ConfigurationError):
        run_many([(toy, PipelineConfig(**FAST))] * 2)


def test_obs_matters_more_at_low_bits():
    g = build_toy(Dims(), seed=0)

    def delta(bits):
        on = run(g, PipelineConfig(bits_w=bits, bits_a=bits, enable_clps=False, enable_cbc=False))[1]
        off = run(g, PipelineConfig(bits_w=bits, bits_a=bits, enable_obs=False, enable_clps=False,
                                    enable_cbc=False))[1]
        return abs(off.e2e_rel_error - on.e2e_rel_error)

    assert delta(8) < delta(4)


def test_all_features_beat_naive_w4a4():
    wins = 0
    for s in range(5):
        g = build_toy(Dims(), seed=s)
        naive = run(g, PipelineConfig(seed=s, enable_cbc=False, enable_obs=False, enable_clps=False))[1]
        full = run(g, PipelineConfig(seed=s))[1]
        wins += full.e2e_rel_error < naive.e2e_rel_error
    assert wins == 5


def test_non_finite_report_rejected(toy, monkeypatch):
    import clq.pipeline

    monkeypatch.setattr(clq.pipeline, "end_to_end_error", lambda *a: math.nan)
    with pytest.raises(CLQError):
        run(toy, PipelineConfig(**FAST))


def test_loaded_artifact_keeps_search_results(tmp_path, toy):
    qm, rep = run(toy, PipelineConfig(**FAST))
    save_quantized(tmp_path / "q", qm)
    back = load_quantized(tmp_path / "q")
    for name, res in qm.state.results.items():
        assert back.state.results[name].to_dict() == res.to_dict()
