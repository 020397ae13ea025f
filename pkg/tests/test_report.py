import json

import pytest

from ctnarrate.errors import (
    MalformedProviderOutput,
    ProviderFailure,
    UnknownOrganLabel,
)
from ctnarrate.report import (
    ExplanationTriple,
    Finding,
    OrganVocabulary,
    RecordedLlmProvider,
    analyze_report,
    default_vocabulary,
    explain_finding,
    extract_findings,
    load_prompt,
    match_organs,
    parse_provider_json,
    prompt_key,
    rank_findings,
    render_prompt,
)

# the organ-matching worked example: report in, organ list out
EXAMPLE_REPORT = (
    "Thickening of the bronchial wall and peribronchial budding tree-like "
    "reticulonodular densities are observed in the bilateral lower lobes. "
    "Other mediastinal main vascular structures, heart contour, size are normal."
)
EXAMPLE_ORGANS = "left lung lower lobe,right lung lower lobe"

# the explanation worked example for "Left subclavian vein collapsed."
EXAMPLE_TRIPLE = {
    "abnormality_explanation": (
        "Your left subclavian vein is found to be collapsed. This vein is an "
        "important blood vessel that carries blood from your arm back to your "
        "heart. When we say it's collapsed, it means that the vein is not as "
        "open as it should be, which might affect how blood flows through it."
    ),
    "input_scan_appearance": (
        "If we look at your CT image, the left subclavian vein will appear "
        "much narrower or even almost closed in some areas. It might look "
        "like a thin line instead of a round, hollow tube."
    ),
    "normal_scan_appearance": (
        "In a normal CT image, this vein would appear open and round, kind of "
        "like a small, hollow tube. It would look uniform and not pinched or "
        "narrow."
    ),
}


class StaticProvider:
    """Answers every prompt with one canned response."""

    def __init__(self, response):
        self.response = response
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(prompt)
        if isinstance(self.response, Exception):
            raise self.response
        return self.response


def make_triple():
    return ExplanationTriple(**EXAMPLE_TRIPLE)


def make_finding(phrase="something abnormal", organs=("aorta",), rank=1):
    return Finding(phrase=phrase, organs=organs, rank=rank,
                   explanation=make_triple())


class TestVocabulary:
    def test_loads_exactly_201_unique_labels(self):
        vocab = default_vocabulary()
        assert len(vocab) == 201
        assert len(set(vocab.labels)) == 201

    def test_known_entries_present(self):
        vocab = default_vocabulary()
        for label in ("lung", "left lung lower lobe", "muscle",
                      "thoracic vertebrae 7 (t7)", "larynx supraglottis"):
            assert label in vocab

    def test_wrong_size_rejected(self):
        with pytest.raises(ValueError):
            OrganVocabulary(["lung", "heart"])

    def test_duplicates_rejected(self):
        labels = list(default_vocabulary().labels)
        labels[5] = labels[0]
        with pytest.raises(ValueError):
            OrganVocabulary(labels)


class TestMatchOrgans:
    def test_worked_example(self):
        vocab = default_vocabulary()
        provider = StaticProvider(EXAMPLE_ORGANS)
        organs = match_organs(EXAMPLE_REPORT, vocab, provider)
        assert organs == ["left lung lower lobe", "right lung lower lobe"]
        # the prompt embeds the whole vocabulary and the report
        assert "'muscle'" in provider.prompts[0]
        assert EXAMPLE_REPORT in provider.prompts[0]

    def test_none_answer_gives_empty_list(self):
        organs = match_organs("Everything normal.", default_vocabulary(),
                              StaticProvider("none"))
        assert organs == []

    def test_unknown_label_rejected(self):
        with pytest.raises(UnknownOrganLabel) as err:
            match_organs(EXAMPLE_REPORT, default_vocabulary(),
                         StaticProvider("flux capacitor"))
        assert err.value.label == "flux capacitor"

    def test_empty_report_rejected(self):
        with pytest.raises(ValueError):
            match_organs("   ", default_vocabulary(), StaticProvider("none"))

    def test_duplicate_labels_deduplicated(self):
        organs = match_organs(EXAMPLE_REPORT, default_vocabulary(),
                              StaticProvider("aorta, aorta, heart"))
        assert organs == ["aorta", "heart"]


class TestExtractFindings:
    def test_verbatim_phrase_accepted(self):
        report = "There is a nodule in the right lung. Heart is normal."
        response = json.dumps(
            [{"phrase": "There is a nodule in the right lung.",
              "organs": ["right lung"]}]
        )
        found = extract_findings(report, StaticProvider(response))
        assert found == [("There is a nodule in the right lung.", ["right lung"])]

    def test_non_verbatim_phrase_rejected(self):
        report = "There is a nodule in the right lung."
        response = json.dumps(
            [{"phrase": "Nodule seen in lung", "organs": ["right lung"]}]
        )
        with pytest.raises(MalformedProviderOutput):
            extract_findings(report, StaticProvider(response))

    def test_empty_report_rejected(self):
        with pytest.raises(ValueError):
            extract_findings("", StaticProvider("[]"))

    def test_unparseable_output(self):
        with pytest.raises(MalformedProviderOutput):
            extract_findings("Report text.", StaticProvider("I found nothing"))

    def test_code_fenced_json_salvaged(self):
        report = "Pleural effusion is present."
        inner = json.dumps([{"phrase": "Pleural effusion is present.",
                             "organs": ["pleura"]}])
        found = extract_findings(report, StaticProvider(f"```json\n{inner}\n```"))
        assert found[0][1] == ["pleura"]


class TestExplainFinding:
    def test_worked_example_parses(self):
        provider = StaticProvider(json.dumps(EXAMPLE_TRIPLE))
        triple = explain_finding("Left subclavian vein collapsed.", provider)
        assert triple.abnormality_explanation.startswith(
            "Your left subclavian vein is found to be collapsed"
        )
        assert triple.as_dict() == EXAMPLE_TRIPLE

    def test_missing_key_rejected(self):
        partial = {k: v for k, v in EXAMPLE_TRIPLE.items()
                   if k != "normal_scan_appearance"}
        with pytest.raises(MalformedProviderOutput):
            explain_finding("x", StaticProvider(json.dumps(partial)))

    def test_empty_field_rejected(self):
        bad = dict(EXAMPLE_TRIPLE, input_scan_appearance="  ")
        with pytest.raises(MalformedProviderOutput):
            explain_finding("x", StaticProvider(json.dumps(bad)))

    def test_over_budget_field_rejected(self):
        bad = dict(EXAMPLE_TRIPLE, abnormality_explanation="w" * 801)
        with pytest.raises(MalformedProviderOutput):
            explain_finding("x", StaticProvider(json.dumps(bad)))


class TestRankFindings:
    def test_single_finding(self):
        ranked = rank_findings([make_finding(rank=3)], StaticProvider("[1]"))
        assert len(ranked) == 1
        assert ranked[0].rank == 1

    def test_scripted_reorder(self):
        a = make_finding(phrase="finding A", rank=1)
        b = make_finding(phrase="finding B", rank=2)
        ranked = rank_findings([a, b], StaticProvider("[2, 1]"))
        assert [f.phrase for f in ranked] == ["finding B", "finding A"]
        assert [f.rank for f in ranked] == [1, 2]

    def test_provider_failure_falls_back_to_input_order(self, caplog):
        findings = [make_finding(phrase=f"finding {i}", rank=9) for i in range(3)]
        with caplog.at_level("WARNING"):
            ranked = rank_findings(
                findings, StaticProvider(ProviderFailure("down"))
            )
        assert [f.phrase for f in ranked] == [f.phrase for f in findings]
        assert [f.rank for f in ranked] == [1, 2, 3]
        assert any("keeping input order" in r.message for r in caplog.records)

    def test_non_permutation_falls_back(self, caplog):
        findings = [make_finding(phrase=f"finding {i}") for i in range(2)]
        with caplog.at_level("WARNING"):
            ranked = rank_findings(findings, StaticProvider("[1, 1]"))
        assert [f.rank for f in ranked] == [1, 2]

    def test_output_is_permutation_of_input(self):
        findings = [make_finding(phrase=f"finding {i}") for i in range(4)]
        ranked = rank_findings(findings, StaticProvider("[3, 1, 4, 2]"))
        assert sorted(f.phrase for f in ranked) == sorted(
            f.phrase for f in findings
        )
        assert [f.rank for f in ranked] == [1, 2, 3, 4]


class TestFindingType:
    def test_organ_outside_vocabulary_rejected(self):
        with pytest.raises(UnknownOrganLabel):
            make_finding(organs=("warp drive",))

    def test_no_organs_rejected(self):
        with pytest.raises(ValueError):
            make_finding(organs=())


class TestRecordedProvider:
    def test_identical_prompt_identical_response(self):
        mock = RecordedLlmProvider({})
        mock.record("hello", "world")
        assert mock.complete("hello") == "world"
        assert mock.complete("hello") == "world"

    def test_unknown_prompt_fails(self):
        with pytest.raises(ProviderFailure):
            RecordedLlmProvider({}).complete("unseen")

    def test_fixture_round_trip(self, tmp_path):
        mock = RecordedLlmProvider({})
        mock.record("p", "r")
        path = tmp_path / "mock.json"
        path.write_text(json.dumps(mock.responses))
        loaded = RecordedLlmProvider.from_file(path)
        assert loaded.complete("p") == "r"
        assert prompt_key("p") in loaded.responses


class TestFullStage:
    def build_recorded(self, report):
        """Record responses for the exact prompts the stage will issue."""
        vocab = default_vocabulary()
        mock = RecordedLlmProvider({})
        extract_prompt = render_prompt(
            load_prompt("extract_findings"),
            organs=vocab.as_prompt_block(), report=report,
        )
        mock.record(extract_prompt, json.dumps([
            {"phrase": "Pleural effusion is present.", "organs": ["pleura"]},
            {"phrase": "A nodule is seen in the left lung.",
             "organs": ["left lung"]},
        ]))
        for phrase in ("Pleural effusion is present.",
                       "A nodule is seen in the left lung."):
            explain_prompt = render_prompt(
                load_prompt("explain_finding"), phrase=phrase
            )
            mock.record(explain_prompt, json.dumps(EXAMPLE_TRIPLE))
        rank_prompt = render_prompt(
            load_prompt("rank_findings"),
            findings="1. Pleural effusion is present.\n"
                     "2. A nodule is seen in the left lung.",
        )
        mock.record(rank_prompt, "[2, 1]")
        return mock

    def test_deterministic_output(self):
        report = ("Pleural effusion is present. A nodule is seen in the left "
                  "lung.")
        mock = self.build_recorded(report)
        first = analyze_report(report, mock)
        second = analyze_report(report, mock)
        assert [f.as_dict() for f in first] == [f.as_dict() for f in second]
        assert [f.rank for f in first] == [1, 2]
        assert first[0].phrase == "A nodule is seen in the left lung."


def test_parse_provider_json_rejects_double_wrapping():
    with pytest.raises(MalformedProviderOutput):
        parse_provider_json("```json\n```json\n{}\n```\n```")
