"""
Tests for JSON config loading and its error messages.
"""

import unittest

from src.config import DEFAULT_MODES, config_from_dict, load_config
from src.cost_model import get_preset
from src.errors import ConfigError, NegativePopulationError, TraceParseError
from tests.sim_test_utils import SimTestCase


class TestLoadConfig(SimTestCase):
    """Well-formed configs."""

    def test_trace_driven(self):
        """Initial peers come from the trace; its path is relative to the config."""
        self.write_trace("churn.jsonl", [(0, 10), (60, -1), (300, 2)])
        path = self.write_config("exp.json", {"stages": 4, "trace": "churn.jsonl", "seeds": [1, 2]})
        experiment = load_config(path)
        self.assertEqual([len(s) for s in experiment.sim.initial_peers], [3, 3, 2, 2])
        self.assertEqual(experiment.sim.duration_s, 300.0)
        self.assertEqual(experiment.seeds, [1, 2])
        self.assertEqual(experiment.modes, [None, 300.0, 60.0])
        self.assertEqual(experiment.trace_path, self.path("churn.jsonl"))
        self.assertEqual(len(experiment.sim.trace), 3)

    def test_explicit_peers(self):
        """Per-stage counts or device lists, with the default device for counts."""
        path = self.write_config("exp.json", {
            "stages": 2,
            "initial_peers": [2, [{"rtt_seconds": 0.05}, {"service_seconds": 0.5}]],
            "device": {"service_seconds": 1.5},
            "duration_s": 100,
            "shape": "xxlarge",
            "modes": ["none", "T=30"],
            "granularity": "fluid",
            "compression": "int8",
            "kills": [{"t": 50, "keep_per_stage": 1}],
            "bucket_s": 10,
        })
        sim = load_config(path).sim
        self.assertEqual(sim.initial_peers[0][0].service_seconds, 1.5)
        self.assertEqual(sim.initial_peers[1][0].device.rtt_seconds, 0.05)
        self.assertIsNone(sim.initial_peers[1][0].service_seconds)
        self.assertEqual(sim.initial_peers[1][1].service_seconds, 0.5)
        self.assertEqual(sim.join_peer.service_seconds, 1.5)
        self.assertEqual(sim.shape, get_preset("xxlarge"))
        self.assertEqual(sim.granularity, "fluid")
        self.assertEqual(str(sim.compression), "int8")
        self.assertEqual(sim.kills[0].t, 50.0)
        self.assertEqual(sim.bucket_s, 10.0)
        self.assertEqual(sim.duration_s, 100.0)

    def test_custom_shape(self):
        """A shape object instead of a preset name."""
        document = {"stages": 1, "initial_peers": [1], "duration_s": 10,
                    "shape": {"preset": "base", "layers_per_stage": 2}}
        self.assertEqual(config_from_dict(document).sim.shape.layers_per_stage, 2)

    def test_defaults(self):
        """Modes and seeds have defaults."""
        experiment = config_from_dict({"stages": 1, "initial_peers": [1], "duration_s": 10})
        self.assertEqual(len(experiment.modes), len(DEFAULT_MODES))
        self.assertEqual(experiment.seeds, [0])
        self.assertIsNone(experiment.trace_path)

    def test_default_compression_follows_preset(self):
        """The ours preset runs with int8 activations; other shapes send them raw."""
        ours = config_from_dict({"stages": 1, "initial_peers": [1], "duration_s": 10})
        self.assertEqual(str(ours.sim.compression), "int8")
        base = config_from_dict({"stages": 1, "initial_peers": [1], "duration_s": 10, "shape": "base"})
        self.assertEqual(str(base.sim.compression), "none")
        custom = config_from_dict({"stages": 1, "initial_peers": [1], "duration_s": 10,
                                   "shape": {"d_model": 64, "d_ffn": 256, "n_heads": 4}})
        self.assertEqual(str(custom.sim.compression), "none")
        explicit = config_from_dict({"stages": 1, "initial_peers": [1], "duration_s": 10, "compression": "none"})
        self.assertEqual(str(explicit.sim.compression), "none")


class TestConfigErrors(SimTestCase):
    """Every problem names the file and the key."""

    def check(self, document, expected):
        path = self.write_config("bad.json", document)
        self.assert_error(lambda: load_config(path), ConfigError, expected, filename=path)

    def test_unknown_key(self):
        self.check({"stages": 1, "initial_peers": [1], "duration_s": 1, "colour": "red"}, ["colour: unknown key"])

    def test_missing_stages(self):
        self.check({"initial_peers": [1], "duration_s": 1}, ["stages"])

    def test_wrong_type(self):
        self.check({"stages": "four", "initial_peers": [1], "duration_s": 1}, ["stages: expected int", '"four"'])
        self.check({"stages": 1, "initial_peers": [1], "duration_s": 1, "gamma": True}, ["gamma: expected float"])

    def test_empty_stage(self):
        self.check({"stages": 2, "initial_peers": [1, 0], "duration_s": 1}, ["Stage 1 has no initial peers"])

    def test_wrong_stage_count(self):
        self.check({"stages": 3, "initial_peers": [1, 1], "duration_s": 1}, ["initial_peers", "exactly 3"])

    def test_no_population(self):
        self.check({"stages": 2, "duration_s": 1}, ["initial_peers: required"])

    def test_missing_duration(self):
        self.check({"stages": 1, "initial_peers": [1]}, ["duration_s: required"])

    def test_bad_device(self):
        self.check({"stages": 1, "initial_peers": [1], "duration_s": 1, "device": {"speed": 2}},
                   ["device.speed: unknown key"])
        self.check({"stages": 1, "initial_peers": [1], "duration_s": 1, "device": {"upload_bps": -1}},
                   ["device:", "upload_bps"])

    def test_bad_modes(self):
        self.check({"stages": 1, "initial_peers": [1], "duration_s": 1, "modes": ["never"]}, ["modes:", "never"])
        self.check({"stages": 1, "initial_peers": [1], "duration_s": 1, "modes": []}, ["modes: must be"])

    def test_bad_seeds(self):
        self.check({"stages": 1, "initial_peers": [1], "duration_s": 1, "seeds": [1.5]}, ["seeds:"])

    def test_bad_option_value(self):
        self.check({"stages": 1, "initial_peers": [1], "duration_s": 1, "granularity": "packet"}, ["granularity"])

    def test_bad_compression(self):
        self.check({"stages": 1, "initial_peers": [1], "duration_s": 1, "compression": "zip"}, ["compression:"])

    def test_bad_kills(self):
        self.check({"stages": 1, "initial_peers": [1], "duration_s": 1, "kills": [{"keep_per_stage": 1}]},
                   ["kills[0]"])

    def test_unknown_preset(self):
        self.check({"stages": 1, "initial_peers": [1], "duration_s": 1, "shape": "huge"}, ["shape:", "huge"])

    def test_missing_trace(self):
        self.check({"stages": 1, "trace": "nope.jsonl"}, ["trace: cannot read"])

    def test_trace_too_small(self):
        """The trace is loaded with one peer per stage as its floor."""
        self.write_trace("small.jsonl", [(0, 3), (10, 1)])
        path = self.write_config("exp.json", {"stages": 4, "trace": "small.jsonl"})
        self.assert_error(lambda: load_config(path), NegativePopulationError, ["below the floor of 4", "line 1"])

    def test_invalid_json(self):
        """Syntax errors carry the position."""
        path = self.write_text("bad.json", '{\n  "stages": 2,\n  "duration_s": 5,,\n}')
        self.assert_error(lambda: load_config(path), ConfigError, ["invalid JSON"], filename=path, expected_line=3)

    def test_missing_file(self):
        path = self.path("absent.json")
        self.assert_error(lambda: load_config(path), ConfigError, ["cannot read config"], filename=path)

    def test_not_an_object(self):
        self.check([1, 2], ["must be a JSON object"])

    def test_trace_errors_propagate(self):
        """A malformed trace keeps its own line-numbered error."""
        self.write_text("broken.jsonl", '{"t": 0, "delta": 4}\n{"t": 1, "delta": }\n')
        path = self.write_config("exp.json", {"stages": 2, "trace": "broken.jsonl"})
        self.assert_error(lambda: load_config(path), TraceParseError, ["broken.jsonl"], expected_line=2)


if __name__ == "__main__":
    unittest.main()
