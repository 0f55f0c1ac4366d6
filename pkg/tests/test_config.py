import pytest

from dualpath.config import parse_config, read_config_file, validate_run
from dualpath.errors import ConfigurationError


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        (tmp_path / "c.txt").write_text("")
        c = parse_config(tmp_path / "c.txt")
        assert (c.learning_rate, c.batch_size, c.epochs, c.beta1, c.beta2) == (1e-4, 16, 100, 0.5, 0.999)
        assert (c.lambda1, c.lambda2, c.mu1, c.mu2) == (0.8, 1.0, 0.8, 1.0)
        assert (c.k1, c.k2, c.k3) == (0.5, 0.5, 1.0)

    def test_precedence(self, tmp_path):
        (tmp_path / "c.txt").write_text("margin=0.3\nepochs = 5  # short run\n")
        assert parse_config(tmp_path / "c.txt").margin == 0.3
        c = parse_config(tmp_path / "c.txt", {"margin": "0.7"})
        assert c.margin == 0.7 and c.epochs == 5

    def test_unknown_key_named(self, tmp_path):
        (tmp_path / "c.txt").write_text("learnig_rate=0.1\n")
        with pytest.raises(ConfigurationError, match=r"c.txt:1: unknown key 'learnig_rate'"):
            parse_config(tmp_path / "c.txt")

    def test_type_error_named(self, tmp_path):
        (tmp_path / "c.txt").write_text("\nbatch_size=big\n")
        with pytest.raises(ConfigurationError, match=r"c.txt:2: key 'batch_size' expects int"):
            parse_config(tmp_path / "c.txt")

    def test_bool_values(self):
        assert parse_config(None, {"all_pairs": "yes"}).all_pairs is True
        with pytest.raises(ConfigurationError):
            parse_config(None, {"all_pairs": "maybe"})

    def test_missing_line_separator(self, tmp_path):
        (tmp_path / "c.txt").write_text("epochs 5\n")
        with pytest.raises(ConfigurationError, match="key=value"):
            read_config_file(tmp_path / "c.txt")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            parse_config(tmp_path / "nope.txt")

    def test_render_round_trips(self, tmp_path):
        c = parse_config(None, {"seed": 3, "metric_variant": "ppml", "margin": 0.25})
        (tmp_path / "c.txt").write_text(c.render())
        assert parse_config(tmp_path / "c.txt") == c


class TestValidate:
    def test_batch_size_one(self):
        with pytest.raises(ConfigurationError, match="metric losses need in-batch negatives"):
            validate_run(parse_config(None, {"batch_size": 1}))

    @pytest.mark.parametrize("kv", [("margin", "0"), ("metric_variant", "triplet"), ("learning_rate", "-1"),
                                    ("beta2", "1.0"), ("epochs", "0")])
    def test_rejects(self, kv):
        with pytest.raises(ConfigurationError):
            validate_run(parse_config(None, dict([kv])))

    def test_constructor_checks(self):
        with pytest.raises(ConfigurationError):
            parse_config(None, {"corpus": "train"})
