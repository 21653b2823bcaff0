import tempfile
import unittest
from pathlib import Path

from pcgp import common as rc
from pcgp.config import DEFAULT_PROBES, TrainConfig, load_config, parse_config_text


class ConfigTests(unittest.TestCase):
    def test_defaults(self):
        cfg = TrainConfig().validate()
        self.assertEqual((cfg.beta, cfg.gamma), (1.0, 1.0))
        self.assertEqual((cfg.batch_size, cfg.known_count), (96, 48))
        self.assertEqual(cfg.lr, 1e-4)
        self.assertEqual(cfg.kl_length, 0.2)
        self.assertEqual(cfg.probes, DEFAULT_PROBES)
        self.assertEqual(cfg.input_scale, 0.1)

    def test_layer_dims_mirror_the_encoder(self):
        cfg = TrainConfig(nx=4, ny=4, hidden=(8, 6), latent=3)
        self.assertEqual(cfg.layer_dims(), [16, 8, 6, 3, 6, 8, 16])
        self.assertEqual(cfg.encoder_end, 3)

    def test_parse_skips_comments_and_blanks(self):
        text = "# header\n\nbeta = 0.5  # physics off-ish\nhidden=64,32\n"
        self.assertEqual(parse_config_text(text), {"beta": "0.5", "hidden": "64,32"})

    def test_malformed_line_names_line_number(self):
        with self.assertRaisesRegex(rc.UsageError, "line 2"):
            parse_config_text("beta = 1\nnonsense\n")

    def test_unknown_key_rejected(self):
        with self.assertRaisesRegex(rc.UsageError, "bogus"):
            TrainConfig.from_mapping({"bogus": "1"})

    def test_bad_value_rejected(self):
        with self.assertRaises(rc.UsageError):
            TrainConfig.from_mapping({"epochs": "many"})
        with self.assertRaises(rc.UsageError):
            TrainConfig.from_mapping({"squared_kernel": "perhaps"})

    def test_invariants_checked(self):
        with self.assertRaises(rc.UsageError):
            TrainConfig(batch_size=4, known_count=4).validate()
        with self.assertRaises(rc.UsageError):
            TrainConfig(beta=-1.0).validate()
        with self.assertRaises(rc.UsageError):
            TrainConfig(l=0.0).validate()
        with self.assertRaisesRegex(rc.UsageError, "input_scale"):
            TrainConfig(input_scale=0.0).validate()

    def test_text_round_trip(self):
        cfg = TrainConfig(nx=8, ny=9, hidden=(32, 16), squared_kernel=True, sigma2=1e-3,
                          probes=((0.25, 0.5), (1.0, 0.0)))
        again = TrainConfig.from_mapping(parse_config_text(cfg.to_text()))
        self.assertEqual(again, cfg)

    def test_overrides_win_over_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.txt"
            path.write_text("beta = 0\nepochs = 3\n")
            cfg = load_config(path, {"epochs": 7, "gamma": None})
        self.assertEqual(cfg.beta, 0.0)
        self.assertEqual(cfg.epochs, 7)
        self.assertEqual(cfg.gamma, 1.0)


if __name__ == "__main__":
    unittest.main()
