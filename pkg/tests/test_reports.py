"""Report synthesis from labels and the pathology template table."""

import itertools
import json

import numpy as np
import pytest

from moclip import (
    ConfigurationError,
    PathologySet,
    UnknownLabelError,
    make_label_vector,
    prompt_pair,
    rng_stream,
    synthesize_report,
)
from moclip.encoders import MAX_TOKENS, build_vocabulary, tokenize
from moclip.reports import (
    CARDIOMEGALY_SENTENCE,
    TemplateEntry,
    TemplateTable,
    default_template_table,
    load_template_table,
)


@pytest.fixture(scope="module")
def table() -> TemplateTable:
    return default_template_table()


class TestDefaultTable:
    def test_covers_the_full_nih_panel(self, table):
        table.require(PathologySet.nih())

    def test_cardiomegaly_sentence_is_pinned(self, table):
        assert table.entry("Cardiomegaly").report_sentence == CARDIOMEGALY_SENTENCE

    def test_prompt_pairs_differ_per_pathology(self, table):
        for name in PathologySet.nih():
            pos, neg = prompt_pair(name, table)
            assert pos != neg
            assert pos.strip() and neg.strip()

    def test_every_template_string_fits_the_token_budget(self, table):
        vocab = build_vocabulary(table)
        for text in table.sentences():
            seq = tokenize(text, vocab, MAX_TOKENS)
            assert sum(seq.mask) <= MAX_TOKENS

    def test_content_hash_is_stable_and_content_sensitive(self, table):
        assert table.content_hash() == default_template_table().content_hash()
        changed = TemplateTable({
            **table.entries,
            "Edema": TemplateEntry("Different sentence here.", "a", "b"),
        })
        assert changed.content_hash() != table.content_hash()

    def test_unknown_pathology_lookup_raises(self, table):
        with pytest.raises(UnknownLabelError):
            table.entry("Pneumonitis")
        with pytest.raises(UnknownLabelError):
            prompt_pair("Pneumonitis", table)

    def test_require_names_missing_entries(self, table):
        trimmed = TemplateTable({k: v for k, v in table.entries.items()
                                 if k != "Hernia"})
        with pytest.raises(ConfigurationError, match="Hernia"):
            trimmed.require(PathologySet.nih())


class TestTableValidation:
    def test_empty_field_rejected(self):
        with pytest.raises(ConfigurationError):
            TemplateTable({"Edema": TemplateEntry("", "a", "b")})

    def test_identical_prompts_rejected(self):
        with pytest.raises(ConfigurationError):
            TemplateTable({"Edema": TemplateEntry("s", "same", "same")})

    def test_wrong_cardiomegaly_sentence_rejected(self):
        with pytest.raises(ConfigurationError):
            TemplateTable({"Cardiomegaly": TemplateEntry("Big heart.", "a", "b")})

    def test_load_rejects_unknown_fields(self, tmp_path):
        path = tmp_path / "templates.json"
        path.write_text(json.dumps(
            {"Edema": {"report_sentence": "s", "prompt_pos": "a",
                       "prompt_neg": "b", "extra": "x"}}))
        with pytest.raises(ConfigurationError, match="extra"):
            load_template_table(path)

    def test_load_rejects_incomplete_entries(self, tmp_path):
        path = tmp_path / "templates.json"
        path.write_text(json.dumps({"Edema": {"report_sentence": "s"}}))
        with pytest.raises(ConfigurationError):
            load_template_table(path)

    def test_load_none_returns_default(self, table):
        assert load_template_table(None).content_hash() == table.content_hash()

    def test_load_file_round_trip(self, tmp_path, table):
        path = tmp_path / "templates.json"
        path.write_text(json.dumps(
            {n: vars(e) for n, e in table.entries.items()}))
        assert load_template_table(path).content_hash() == table.content_hash()


class TestSynthesizeReport:
    def test_positive_sentence_present_iff_bit_set(self, table):
        """Exhaustive over all 1- and 2-label combinations of 5 diseases."""
        ps = PathologySet.nih()
        subset = ps.diseases[:5]
        combos = [list(c) for c in itertools.combinations(subset, 1)]
        combos += [list(c) for c in itertools.combinations(subset, 2)]
        for names in combos:
            labels = make_label_vector(names, ps)
            text = synthesize_report(labels, table, rng_stream(0, "reports", 0))
            for name in subset:
                sentence = table.entry(name).report_sentence
                assert (sentence in text) == (name in names)

    def test_no_finding_report_is_its_single_sentence(self, table):
        labels = make_label_vector(["No Finding"])
        text = synthesize_report(labels, table, rng_stream(0, "reports", 0))
        assert text == table.entry("No Finding").report_sentence

    def test_unshuffled_order_follows_the_label_panel(self, table):
        ps = PathologySet.nih()
        labels = make_label_vector(["Cardiomegaly", "Atelectasis", "Effusion"], ps)
        text = synthesize_report(labels, table, rng_stream(0, "reports", 0),
                                 shuffle=False)
        expected = " ".join(table.entry(n).report_sentence for n in labels.names())
        assert text == expected

    def test_shuffle_permutes_but_preserves_sentences(self, table):
        ps = PathologySet.nih()
        labels = make_label_vector(list(ps.diseases[:4]), ps)
        sentences = [table.entry(n).report_sentence for n in labels.names()]
        seen = set()
        for i in range(20):
            text = synthesize_report(labels, table, rng_stream(1, "reports", i))
            assert all(s in text for s in sentences)
            assert len(text) == sum(map(len, sentences)) + len(sentences) - 1
            seen.add(text)
        assert len(seen) > 1

    def test_same_rng_key_is_deterministic(self, table):
        ps = PathologySet.nih()
        labels = make_label_vector(list(ps.diseases[:3]), ps)
        a = synthesize_report(labels, table, rng_stream(5, "reports", 9))
        b = synthesize_report(labels, table, rng_stream(5, "reports", 9))
        assert a == b


class TestCrossModuleOrdering:
    def test_label_names_resolve_in_every_module_order(self, table):
        """The pathology ordering is one shared constant end to end."""
        ps = PathologySet.nih()
        assert tuple(table.entries) == ps.names == tuple(iter(ps))
        vec = make_label_vector(list(ps.names[:1]), ps)
        assert vec.names()[0] == ps.names[0]
