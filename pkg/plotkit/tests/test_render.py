import json
from pathlib import Path

import pytest

from plotkit import FigureJob, InputError, render
from plotkit.cli import main

DATA = Path(__file__).parent / "data"
RESULTS = DATA / "results.json"
INTERP = DATA / "interp_copy_caesar11.csv"
INTERP2 = DATA / "interp_reverse_sort.csv"

ALL_KINDS = [
    ("bars", [RESULTS]),
    ("interp", [INTERP, INTERP2]),
    ("select", [RESULTS]),
    ("sparsity", [RESULTS]),
    ("compare", [RESULTS]),
]


class TestRenderKinds:
    @pytest.mark.parametrize("kind,inputs", ALL_KINDS)
    def test_renders_one_file(self, kind, inputs, tmp_path):
        out = tmp_path / f"{kind}.png"
        render(FigureJob(kind=kind, inputs=[str(p) for p in inputs], out=str(out)))
        assert out.exists() and out.stat().st_size > 1000

    @pytest.mark.parametrize("kind,inputs", ALL_KINDS)
    def test_rerender_byte_stable(self, kind, inputs, tmp_path):
        a = tmp_path / "a.png"
        b = tmp_path / "b.png"
        job_a = FigureJob(kind=kind, inputs=[str(p) for p in inputs], out=str(a))
        job_b = FigureJob(kind=kind, inputs=[str(p) for p in inputs], out=str(b))
        render(job_a)
        render(job_b)
        assert a.read_bytes() == b.read_bytes()

    def test_inputs_not_mutated(self, tmp_path):
        before = RESULTS.read_bytes()
        render(FigureJob(kind="bars", inputs=[str(RESULTS)], out=str(tmp_path / "o.png")))
        assert RESULTS.read_bytes() == before


class TestValidation:
    def test_unknown_kind(self):
        with pytest.raises(InputError, match="unknown figure kind"):
            FigureJob(kind="pie", inputs=[str(RESULTS)], out="x.png")

    def test_schema_mismatch_names_field(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"schema_version": 99, "methods": []}))
        with pytest.raises(InputError, match="schema_version"):
            render(FigureJob(kind="bars", inputs=[str(bad)], out=str(tmp_path / "o.png")))

    def test_missing_method_lists_available(self, tmp_path):
        job = FigureJob(
            kind="bars",
            inputs=[str(RESULTS)],
            out=str(tmp_path / "o.png"),
            methods=["not-a-method"],
        )
        with pytest.raises(InputError, match="available"):
            render(job)

    def test_missing_input_file(self, tmp_path):
        job = FigureJob(kind="bars", inputs=["/no/such.json"], out=str(tmp_path / "o.png"))
        with pytest.raises(InputError, match="does not exist"):
            render(job)

    def test_interp_schema_checked(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("alpha,unrelated\n0.0,1.0\n")
        with pytest.raises(InputError, match="missing columns"):
            render(FigureJob(kind="interp", inputs=[str(bad)], out=str(tmp_path / "o.png")))

    def test_se_bars_only_with_stderr(self, tmp_path):
        payload = json.loads(RESULTS.read_text())
        for m in payload["methods"]:
            m.pop("stderr", None)
        careless = tmp_path / "nose.json"
        careless.write_text(json.dumps(payload))
        out = tmp_path / "o.png"
        render(FigureJob(kind="bars", inputs=[str(careless)], out=str(out)))
        assert out.exists()  # renders, but without error bars


class TestCli:
    def test_usage_error_exit_one(self):
        assert main([]) == 1
        assert main(["--kind", "nope", "--in", str(RESULTS), "--out", "x.png"]) == 1

    def test_runtime_error_exit_two(self, tmp_path):
        assert main(["--kind", "bars", "--in", "/no/file.json", "--out", str(tmp_path / "o.png")]) == 2

    def test_happy_path(self, tmp_path):
        out = tmp_path / "bars.png"
        assert main(["--kind", "bars", "--in", str(RESULTS), "--out", str(out)]) == 0
        assert out.exists()

    def test_method_subset(self, tmp_path):
        out = tmp_path / "subset.png"
        rc = main(
            [
                "--kind", "bars", "--in", str(RESULTS), "--out", str(out),
                "--method", "oracle", "--method", "uniform-merge",
            ]
        )
        assert rc == 0 and out.exists()
