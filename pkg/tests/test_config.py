""" testing run configuration files """

import tempfile
import unittest
from pathlib import Path

import langskill
from langskill.config import RESOLVED_CONFIG_NAME, RunConfig, dump_config, load_config, parse_config, save_config
from langskill.errors import ConfigError, UserError

DESK_CONFIG = Path(langskill.__file__).parent / "configs" / "desk.yaml"


class ParseTests(unittest.TestCase):
    """flat YAML parsing"""

    def test_shipped_config_matches_defaults(self):
        self.assertEqual(load_config(DESK_CONFIG), RunConfig())

    def test_empty_text_gives_defaults(self):
        self.assertEqual(parse_config(""), RunConfig())

    def test_values_and_coercion(self):
        cfg = parse_config("horizon: 5\nvq_weight: 1\nvariant: flat\nfreeze_codebook: true\n")
        self.assertEqual(cfg.horizon, 5)
        self.assertIsInstance(cfg.vq_weight, float)
        self.assertEqual(cfg.variant, "flat")
        self.assertTrue(cfg.freeze_codebook)

    def test_overrides_win_and_none_is_ignored(self):
        cfg = parse_config("horizon: 5\niterations: 10\n", {"horizon": 7, "iterations": None})
        self.assertEqual((cfg.horizon, cfg.iterations), (7, 10))

    def test_unknown_key_names_line(self):
        with self.assertRaises(ConfigError) as context:
            parse_config("horizon: 5\n# comment\nbogus: 1\n")
        self.assertEqual(context.exception.line, 3)
        self.assertIn("bogus", str(context.exception))
        self.assertIsInstance(context.exception, UserError)

    def test_nested_value_names_line(self):
        with self.assertRaises(ConfigError) as context:
            parse_config("seed: 1\nhorizon:\n  value: 5\n")
        self.assertEqual(context.exception.line, 2)

    def test_bad_types(self):
        with self.assertRaises(ConfigError) as context:
            parse_config("horizon: five\n")
        self.assertEqual(context.exception.line, 1)
        with self.assertRaises(ConfigError):
            parse_config("freeze_codebook: 1\n")
        with self.assertRaises(ConfigError):
            parse_config("horizon: 2.5\n")

    def test_invalid_values(self):
        with self.assertRaises(ConfigError):
            parse_config("horizon: 0\n")
        with self.assertRaises(ConfigError):
            parse_config("eval_split: train\n")
        with self.assertRaises(ConfigError):
            parse_config("- horizon\n- seed\n")
        with self.assertRaises(ConfigError):
            parse_config("horizon: [1, 2\n")


class WriteTests(unittest.TestCase):
    """resolved configuration files"""

    def test_dump_parses_back(self):
        cfg = RunConfig(horizon=5, lr_policy=3e-4, lr_language=1e-6, variant="continuous", out_dir="runs/x")
        self.assertEqual(parse_config(dump_config(cfg)), cfg)

    def test_save_and_load(self):
        cfg = RunConfig(num_skills=50, eval_split="eval_unseen")
        with tempfile.TemporaryDirectory() as tmp:
            path = save_config(cfg, Path(tmp) / "run")
            self.assertEqual(path.name, RESOLVED_CONFIG_NAME)
            self.assertEqual(load_config(path), cfg)
            with self.assertRaises(ConfigError):
                load_config(Path(tmp) / "missing.yaml")


if __name__ == "__main__":
    unittest.main()
