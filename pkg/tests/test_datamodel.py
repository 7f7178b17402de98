"""
Unit tests for the core domain types, record files and tokenizer.
"""

import json
import random
import pytest

from creative_dp_utils.datamodel import (
    RESERVED_TOKENS,
    Ad,
    CreativeCandidate,
    DatasetRecord,
    FilterVerdict,
    GenerationMode,
    Item,
    RecordFormatError,
    Vocabulary,
    collect_ads,
    detokenize,
    flatten_item_text,
    read_raw_logs,
    read_records,
    tokenize,
    write_raw_logs,
    write_records,
)
from creative_dp_utils.synthetic import make_synthetic_logs


class TestDomainTypes:
    """Validation rules of the record schemas."""

    def test_item_title_is_normalized_and_required(self):
        assert Item(item_id="1", title="  red   mug ").title == "red mug"
        with pytest.raises(ValueError):
            Item(item_id="1", title="   ")

    def test_ad_selling_points_deduplicated_in_order(self):
        ad = Ad(ad_id="a", original_title="mug", selling_points=["cheap", "red", "cheap "])
        assert ad.selling_points == ["cheap", "red"]
        with pytest.raises(ValueError):
            Ad(ad_id="a", original_title="mug", selling_points=["  "])

    def test_ad_all_queries_puts_training_query_first(self):
        ad = Ad(ad_id="a", original_title="mug", query="coffee mug", potential_queries=["cup", "coffee mug"])
        assert ad.all_queries() == ["coffee mug", "cup"]

    def test_record_requires_history_and_response(self, fixture_ads):
        item = Item(item_id="1", title="mug")
        with pytest.raises(ValueError):
            DatasetRecord(user_id="u", history=[], ad=fixture_ads[0], response="x")
        with pytest.raises(ValueError):
            DatasetRecord(user_id="u", history=[item], ad=fixture_ads[0], response="  ")
        with pytest.raises(ValueError):
            DatasetRecord(user_id="u", history=[item], ad=fixture_ads[0], response="x", click_labels=[("1", 2)])

    def test_truncated_keeps_most_recent(self, fixture_ads):
        history = [Item(item_id=str(i), title=f"item {i}") for i in range(10)]
        record = DatasetRecord(user_id="u", history=history, ad=fixture_ads[0], response="x")
        assert [i.item_id for i in record.truncated(3).history] == ["7", "8", "9"]
        assert record.truncated(10) is record

    def test_candidate_match_score_bounds(self):
        with pytest.raises(ValueError):
            CreativeCandidate(ad_id="a", cluster_id=0, mode="query-free", title="t", match_score=1.5)
        candidate = CreativeCandidate(ad_id="a", cluster_id=0, mode="query-free", title="t", match_score=0.5,
                                      verdict=FilterVerdict.fail("length"))
        assert candidate.mode == GenerationMode.QUERY_FREE
        assert candidate.verdict.reason == "length"


class TestFlattenItemText:
    """Flattening items into one sentence."""

    def test_no_attributes_is_title(self):
        assert flatten_item_text(Item(item_id="1", title="red mug")) == "red mug"

    def test_attributes_joined_in_order(self):
        item = Item(item_id="1", title="mug", attributes=[("color", "red")])
        assert flatten_item_text(item) == "mug ; color: red"
        item = Item(item_id="1", title="mug", attributes=[("color", "red"), ("size", "large")])
        assert flatten_item_text(item) == "mug ; color: red ; size: large"

    def test_distinct_fixture_items_flatten_distinctly(self, fixture_records):
        items = {item.item_id: item for record in fixture_records for item in record.history}
        texts = [flatten_item_text(item) for item in items.values()]
        assert len(set(texts)) == len(texts)


class TestRecordFiles:
    """Line-delimited record reading and writing."""

    def test_empty_file_reads_as_empty_list(self, temp_config_dir):
        path = temp_config_dir / "empty.jsonl"
        path.write_text("")
        assert read_records(path) == []

    def test_round_trip_is_identity(self, temp_config_dir, fixture_records):
        path = temp_config_dir / "records.jsonl"
        write_records(fixture_records[:3], path)
        first = path.read_bytes()
        loaded = read_records(path)
        assert loaded == fixture_records[:3]
        write_records(loaded, path)
        assert path.read_bytes() == first

    def test_missing_response_names_the_field(self, temp_config_dir, fixture_records):
        payload = json.loads(fixture_records[0].model_dump_json())
        del payload["response"]
        path = temp_config_dir / "records.jsonl"
        path.write_text(fixture_records[1].model_dump_json() + "\n" + json.dumps(payload) + "\n")
        with pytest.raises(RecordFormatError) as excinfo:
            read_records(path)
        assert excinfo.value.line_number == 2
        assert excinfo.value.field == "response"

    def test_malformed_line_carries_line_number(self, temp_config_dir):
        path = temp_config_dir / "records.jsonl"
        path.write_text("{not json}\n")
        with pytest.raises(RecordFormatError) as excinfo:
            read_records(path)
        assert excinfo.value.line_number == 1

    def test_histories_truncated_on_ingestion(self, temp_config_dir, fixture_records):
        path = temp_config_dir / "records.jsonl"
        write_records(fixture_records, path)
        assert all(len(r.history) <= 2 for r in read_records(path, max_history=2))

    def test_raw_logs_round_trip(self, temp_config_dir):
        rows = make_synthetic_logs(5, n_users=3, n_ads=2, history_length=3)
        path = temp_config_dir / "logs.jsonl"
        write_raw_logs(rows, path)
        assert read_raw_logs(path) == rows

    def test_collect_ads_merges_queries(self, fixture_records):
        ads = collect_ads(fixture_records)
        assert [ad.ad_id for ad in ads] == ["ad-1", "ad-2"]
        assert ads[0].query is None
        assert ads[0].potential_queries == ["hiking gear"]


class TestTokenizer:
    """Vocabulary and tokenize / detokenize."""

    @pytest.fixture
    def vocab(self):
        return Vocabulary.build(["red mug ; color: red", "blue cup with handle"])

    def test_reserved_tokens_first_and_distinct(self, vocab):
        assert vocab.tokens[: len(RESERVED_TOKENS)] == RESERVED_TOKENS
        ids = [vocab.pad_id, vocab.unk_id, vocab.bos_id, vocab.eos_id, vocab.item_id, vocab.user_id, vocab.sep_id]
        assert len(set(ids)) == len(ids)

    def test_empty_text(self, vocab):
        assert tokenize("", vocab, 8) == []

    def test_truncation_keeps_prefix(self, vocab):
        text = " ".join(["red"] * 100)
        full = tokenize(text, vocab, 1000)
        assert len(full) == 100
        assert tokenize(text, vocab, 64) == full[:64]

    def test_unknown_maps_to_unk(self, vocab):
        assert tokenize("zebra", vocab, 4) == [vocab.unk_id]

    def test_round_trip_in_vocabulary(self, vocab):
        text = "red mug ; color: red"
        assert detokenize(tokenize(text, vocab, 64), vocab) == text

    @pytest.mark.parametrize("text", ["a▁b ▁ c", "▁", "x ▁▁y"])
    def test_round_trip_with_literal_space_marker(self, text):
        vocab = Vocabulary.build([text])
        assert detokenize(tokenize(text, vocab, 64), vocab) == text

    def test_max_len_respected_for_random_strings(self, vocab):
        rng = random.Random(0)
        alphabet = "abc red mug;: "
        for _ in range(200):
            text = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 60)))
            max_len = rng.randint(1, 10)
            assert len(tokenize(text, vocab, max_len)) <= max_len

    def test_invalid_max_len(self, vocab):
        with pytest.raises(ValueError):
            tokenize("red", vocab, 0)

    def test_save_load_preserves_hash(self, vocab, temp_config_dir):
        path = temp_config_dir / "vocab.txt"
        vocab.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.tokens == vocab.tokens
        assert loaded.vocab_hash == vocab.vocab_hash

    def test_vocabulary_must_start_with_reserved(self):
        with pytest.raises(ValueError):
            Vocabulary(["red", "mug"])
