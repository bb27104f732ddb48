import pytest

from mdistill.config import ConfigError, load_config, parse_config
from mdistill.netgraph import Architecture


class TestPresets:
    def test_style3_counts(self):
        m = load_config("style3").manifest()
        assert [d.name for d in m.domains] == ["Read", "Lect", "Spon"]
        assert all(m.splits[s] == {"Read": n, "Lect": n, "Spon": n}
                   for s, n in (("train", 600), ("dev", 60), ("test", 100)))

    def test_env3_domains(self):
        doms = load_config("env3").domains
        assert [d.name for d in doms] == ["Near", "Far", "FarNoise"]
        assert doms[1].reverb_tau == 3.0 and doms[1].reverb_taps == 6
        assert doms[2].noise_snr_db == 5.0 and doms[0].reverb_tau is None


class TestParsing:
    def test_comments_and_blank_lines(self):
        cfg = parse_config("# experiment\n\ncorpus.master_seed = 7  # trailing\ntrain.max_epochs=3\n")
        assert cfg.corpus.master_seed == 7 and cfg.train.max_epochs == 3

    def test_stage_seeds_follow_master_seed(self):
        cfg = parse_config("corpus.master_seed = 5\n")
        assert cfg.network.init_seed == 5 and cfg.train.shuffle_seed == 5

    def test_explicit_stage_seed_wins(self):
        cfg = parse_config("corpus.master_seed = 5\ntrain.shuffle_seed = 9\n")
        assert cfg.train.shuffle_seed == 9 and cfg.network.init_seed == 5

    @pytest.mark.parametrize("key", ["train.bogus", "nosuch.key", "corpus", "domain.Read.colour", "a.b.c"])
    def test_unknown_keys_named_in_error(self, key):
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
            parse_config(f"{key} = 1\n")

    def test_line_without_equals(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config("corpus.master_seed = 1\njunk\n")

    @pytest.mark.parametrize("text", ["train.max_epochs = many", "train.w_hard = 2",
                                      "network.architecture = rnn", "corpus.preset = bogus",
                                      "train.student_targets = mixed", "domain.Read.duration_min = 20"])
    def test_invalid_values(self, text):
        with pytest.raises(ConfigError):
            parse_config(text + "\n")

    def test_domain_override_and_new_domain(self):
        cfg = parse_config("domain.Spon.emission_noise_sigma = 0.9\n"
                           "domain.Whisper.duration_min = 2\ndomain.Whisper.duration_max = 4\n")
        doms = {d.name: d for d in cfg.domains}
        assert doms["Spon"].emission_noise_sigma == 0.9
        assert doms["Whisper"].domain_id == 3 and doms["Whisper"].duration_range == (2, 4)

    def test_resolved_text_round_trips(self):
        cfg = parse_config("corpus.preset = env3\nnetwork.architecture = lstm\ntrain.task_mode = ctc\n")
        again = parse_config(cfg.to_text())
        assert again == cfg

    def test_pipeline_config(self):
        from mdistill.synthcorpus import generate_corpus, prepare_features
        cfg = parse_config("corpus.train_utts = 2\ncorpus.dev_utts = 1\ncorpus.test_utts = 1\n"
                           "network.architecture = lstm\ntrain.task_mode = ctc\n")
        features, _ = prepare_features(generate_corpus(cfg.manifest()))
        pc = cfg.pipeline_config(features, cfg.corpus.vocab_size)
        assert pc.network.architecture is Architecture.LSTM
        assert pc.network.output_dim == 21 and pc.network.input_dim == 8 * 3 * 8
        assert pc.finetune_max_epochs is None

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(str(tmp_path / "nope.cfg"))
