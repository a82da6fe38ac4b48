import dataclasses
import json

import numpy as np
import pytest

from egrusim.cli import main
from egrusim.modelio import load_model_file, save_feature_dataset, save_model_file
from egrusim.synth import synth_lm


@pytest.fixture(scope="module")
def full_lm(tmp_path_factory):
    d = tmp_path_factory.mktemp("full")
    a, b = d / "a.egru", d / "b.egru"
    assert main(["synth", "--kind", "lm", "--dims", "750,1350,1350,750", "--sparsity", "0.95", "--seed", "7",
                 "--output", str(a)]) == 0
    assert main(["synth", "--kind", "lm", "--dims", "750,1350,1350,750", "--sparsity", "0.95", "--seed", "7",
                 "--output", str(b)]) == 0
    return a, b


@pytest.fixture
def tiny_lm_file(tmp_path):
    path = tmp_path / "lm.egru"
    assert main(["synth", "--kind", "lm", "--dims", "8,12,8", "--vocab-size", "25", "--sparsity", "0.5",
                 "--theta", "0.1", "--output", str(path)]) == 0
    return path


@pytest.fixture
def silent_lm_file(tmp_path):
    m = synth_lm((8, 12, 8), vocab_size=25, sparsity=0.5)
    layers = [dataclasses.replace(p, theta=np.full(p.n_units, 1e9, np.float32)) for p in m.layers]
    path = tmp_path / "silent.egru"
    save_model_file(dataclasses.replace(m, layers=layers), path)
    return path


@pytest.fixture
def text_file(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "text.txt"
    path.write_text(" ".join(f"w{i}" for i in rng.integers(0, 30, 120)) + "\n")
    return path


def test_synth_is_byte_identical(full_lm):
    a, b = full_lm
    assert a.read_bytes() == b.read_bytes()


def test_partition_full_model_fits_on_150(full_lm, capsys):
    assert main(["partition", "--model", str(full_lm[0]), "--pes", "150"]) == 0
    out = capsys.readouterr().out
    assert "OK all PEs within budget" in out and "FAIL" not in out


def test_partition_full_model_fails_on_one_pe_per_layer(full_lm, capsys):
    assert main(["partition", "--model", str(full_lm[0]), "--pes", "1,1,1"]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_partition_tiny_model_on_one_pe(tiny_lm_file, capsys):
    m = load_model_file(tiny_lm_file)
    assert main(["partition", "--model", str(tiny_lm_file), "--pes", ",".join("1" * len(m.layers))]) == 0


def test_budget_override(tiny_lm_file):
    assert main(["partition", "--model", str(tiny_lm_file), "--pes", "2", "--budget-data-kb", "0.1"]) == 3


def test_eval_lm_silent_model_scores_vocab_size(silent_lm_file, text_file, tmp_path, capsys):
    report = tmp_path / "r.json"
    assert main(["eval-lm", "--model", str(silent_lm_file), "--input", str(text_file), "--report", str(report)]) == 0
    out = capsys.readouterr().out
    ppl = float(out.split("ppl ")[1].split()[0])
    assert ppl == pytest.approx(25, rel=1e-6)
    doc = json.loads(report.read_text())
    assert doc["run"]["ppl"] == pytest.approx(25, rel=1e-9)
    assert doc["format"] == "egrusim-profile"


def test_eval_lm_is_deterministic(tiny_lm_file, text_file, capsys):
    main(["eval-lm", "--model", str(tiny_lm_file), "--input", str(text_file), "--pes", "3"])
    first = capsys.readouterr().out
    main(["eval-lm", "--model", str(tiny_lm_file), "--input", str(text_file), "--pes", "3"])
    assert capsys.readouterr().out == first


def test_generate_greedy_ignores_seed(tiny_lm_file, capsys):
    outs = []
    for seed in ("1", "2"):
        assert main(["generate", "--model", str(tiny_lm_file), "--prompt", "w1 w2", "--length", "8",
                     "--temperature", "1e-9", "--seed", seed]) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1] and len(outs[0].split()) == 8


def test_prune_reaches_sparsity(tiny_lm_file, tmp_path):
    out = tmp_path / "p.egru"
    assert main(["prune", "--model", str(tiny_lm_file), "--sparsity", "0.9", "--output", str(out)]) == 0
    for p in load_model_file(out).layers:
        for m in p.weight_matrices():
            assert m.nnz <= int(np.ceil(0.1 * m.shape[0] * m.shape[1]))


def test_eval_dvs_and_batch(tmp_path, capsys):
    model = tmp_path / "dvs.egru"
    assert main(["synth", "--kind", "dvs", "--dims", "6,9,7", "--classes", "4", "--theta", "0.05",
                 "--output", str(model)]) == 0
    rng = np.random.default_rng(1)
    data = tmp_path / "d.bin"
    data.write_bytes(save_feature_dataset([(rng.standard_normal((3, 6)), k % 4) for k in range(6)]))
    outs = []
    for batch in ("1", "6"):
        report = tmp_path / f"r{batch}.json"
        assert main(["eval-dvs", "--model", str(model), "--input", str(data), "--batch", batch,
                     "--report", str(report)]) == 0
        capsys.readouterr()
        outs.append(json.loads(report.read_text())["run"]["predictions"])
    assert outs[0] == outs[1]


def test_profile_dispatches(tiny_lm_file, text_file, capsys):
    assert main(["profile", "--model", str(tiny_lm_file), "--input", str(text_file)]) == 0
    assert "recurrent_matmul" in capsys.readouterr().out


def test_missing_file_is_format_error(tmp_path):
    assert main(["partition", "--model", str(tmp_path / "nope.egru")]) == 4


def test_corrupt_file_is_format_error(tiny_lm_file):
    tiny_lm_file.write_bytes(tiny_lm_file.read_bytes()[:-5])
    assert main(["partition", "--model", str(tiny_lm_file)]) == 4


def test_wrong_input_dim_is_dimension_error(tmp_path, capsys):
    model = tmp_path / "dvs.egru"
    main(["synth", "--kind", "dvs", "--dims", "6,9,7", "--classes", "4", "--output", str(model)])
    data = tmp_path / "d.bin"
    data.write_bytes(save_feature_dataset([(np.zeros((2, 5)), 0)]))
    assert main(["eval-dvs", "--model", str(model), "--input", str(data)]) == 5


def test_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["partition"])
    assert e.value.code == 2


def test_partition_whole_stack_on_one_pe(full_lm, tiny_lm_file):
    assert main(["partition", "--model", str(full_lm[0]), "--pes", "1"]) == 3
    assert main(["partition", "--model", str(tiny_lm_file), "--pes", "1"]) == 0


def test_partition_fewer_pes_than_layers(full_lm):
    assert main(["partition", "--model", str(full_lm[0]), "--pes", "2"]) == 2


def test_default_pes_ignore_the_budget_for_full_models(full_lm, tmp_path, capsys):
    assert main(["generate", "--model", str(full_lm[0]), "--prompt", "w1", "--length", "2", "--seed", "0"]) == 0
    assert len(capsys.readouterr().out.split()) == 2
