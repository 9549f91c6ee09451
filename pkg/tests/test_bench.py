import numpy as np
import pytest

from vphype.bench import build_mixers, core_flops, loglog_slope, mixer_flops, rows_to_csv, run_bench, validate_lengths
from vphype.errors import ConfigError


class TestSlope:
    @pytest.mark.parametrize("power", [1.0, 2.0, 0.5])
    def test_recovers_power_law(self, power):
        lengths = [256, 512, 1024, 2048, 4096]
        assert loglog_slope(lengths, [3.0 * n**power for n in lengths]) == pytest.approx(power, abs=1e-12)


class TestValidation:
    @pytest.mark.parametrize("lengths", [[1, 2, 4], [16, 8, 32, 256], [10, 20, 40, 80]])
    def test_rejects(self, lengths):
        with pytest.raises(ConfigError):
            validate_lengths(lengths)


class TestFlops:
    def test_scan_core_doubles_exactly(self):
        mixer = build_mixers(16)["scan"]
        counts = [core_flops(mixer, 16, n) for n in (64, 128, 256)]
        assert counts[1] == 2 * counts[0]
        assert counts[2] == 2 * counts[1]

    def test_attention_core_quadruples_exactly(self):
        mixer = build_mixers(16, heads=2)["attention"]
        counts = [core_flops(mixer, 16, n) for n in (64, 128, 256)]
        assert counts[1] == 4 * counts[0]
        assert counts[2] == 4 * counts[1]

    def test_whole_scan_mixer_nearly_doubles(self):
        mixer = build_mixers(16)["scan"]
        a, b = mixer_flops(mixer, 16, 256), mixer_flops(mixer, 16, 512)
        assert b / a == pytest.approx(2.0, rel=1e-3)

    def test_whole_attention_approaches_four(self):
        mixer = build_mixers(16)["attention"]
        counts = [mixer_flops(mixer, 16, n) for n in (256, 512, 1024, 2048)]
        ratios = np.array(counts[1:]) / np.array(counts[:-1])
        assert np.all(np.diff(ratios) > 0)
        assert 3.8 < ratios[-1] < 4.0


def test_csv_rows():
    rows = run_bench(dim=8, lengths=[8, 16, 32, 128], repeats=1)
    text = rows_to_csv(rows)
    lines = text.strip().splitlines()
    assert lines[0] == "mixer,L,flops,median_ns,slope"
    assert [r.mixer for r in rows] == ["scan"] * 4 + ["attention"] * 4
    assert all(r.median_ns > 0 for r in rows)
