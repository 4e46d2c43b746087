"""Exporter conformance: exported files must satisfy the fusion engine's
own validating reader, with the exact token-count contracts."""
import io
import os

import numpy as np
import pytest

from precofact import dataio
from precofact.errors import DatasetFormatError

from precofact_exporter.export import export_manifest
from precofact_exporter.manifest import ManifestError, read_manifest
from precofact_exporter.pcf1 import CLASS_NAMES

from conftest import write_manifest

COLUMNS = ("id", "claim", "claim_image", "document", "document_image", "category")


def ten_row_manifest(tmp_path, image_dir, with_category=True, delimiter="\t"):
    rows = []
    for i in range(10):
        row = {
            "id": f"sample-{i:03d}",
            "claim": f"the cat claim {i}",
            "claim_image": f"img{i}.png",
            "document": f"dog news photo {i} " * (i + 1),
            "document_image": f"img{(i + 3) % 10}.png",
        }
        if with_category:
            row["category"] = CLASS_NAMES[i % 5]
        rows.append(row)
    columns = COLUMNS if with_category else COLUMNS[:-1]
    return write_manifest(tmp_path / "manifest.tsv", rows, columns,
                          delimiter=delimiter), rows


class TestManifest:
    def test_reads_rows_and_labels(self, tmp_path, image_dir):
        path, _ = ten_row_manifest(tmp_path, image_dir)
        rows = read_manifest(path, images_root=image_dir)
        assert len(rows) == 10
        assert rows[0].sample_id == "sample-000"
        assert rows[0].label == 0
        assert rows[4].label == 4
        assert rows[0].claim_image == os.path.join(image_dir, "img0.png")

    def test_missing_column_rejected(self, tmp_path):
        path = write_manifest(
            tmp_path / "bad.tsv",
            [{"claim": "x", "claim_image": "a.png", "document": "y"}],
            ("claim", "claim_image", "document"),
        )
        with pytest.raises(ManifestError, match="document_image"):
            read_manifest(path)

    def test_unknown_category_rejected(self, tmp_path):
        path = write_manifest(
            tmp_path / "bad.tsv",
            [{"id": "a", "claim": "x", "claim_image": "a.png",
              "document": "y", "document_image": "b.png",
              "category": "Totally_True"}],
            COLUMNS,
        )
        with pytest.raises(ManifestError, match="Totally_True"):
            read_manifest(path)

    def test_mixed_labels_rejected(self, tmp_path):
        path = write_manifest(
            tmp_path / "bad.tsv",
            [{"id": "a", "claim": "x", "claim_image": "a.png",
              "document": "y", "document_image": "b.png",
              "category": "Refute"},
             {"id": "b", "claim": "x", "claim_image": "a.png",
              "document": "y", "document_image": "b.png",
              "category": ""}],
            COLUMNS,
        )
        with pytest.raises(ManifestError, match="all-or-none"):
            read_manifest(path)

    def test_comma_delimiter(self, tmp_path, image_dir):
        path, _ = ten_row_manifest(tmp_path, image_dir, delimiter=",")
        rows = read_manifest(path, delimiter=",", images_root=image_dir)
        assert len(rows) == 10


class TestExportConformance:
    def test_ten_samples_load_through_engine_reader(self, tmp_path, image_dir,
                                                    stack):
        manifest, _ = ten_row_manifest(tmp_path, image_dir)
        rows = read_manifest(manifest, images_root=image_dir)
        out = tmp_path / "export.pcf1"
        result = export_manifest(rows, stack, out, batch_size=4,
                                 log_stream=io.StringIO())
        assert result.written == 10
        assert result.skipped == []

        header, samples = dataio.read_dataset(out)
        assert header.sample_count == 10
        assert header.has_labels
        assert header.text_width == stack.text_width
        assert header.image_width == stack.image_width
        for i, sample in enumerate(samples):
            assert sample.sample_id == f"sample-{i:03d}"
            assert sample.label == i % 5
            assert sample.claim_image.length == 197
            assert sample.doc_image.length == 197
            assert sample.claim_text.length <= 512
            assert sample.doc_text.length <= 512

    def test_re_export_is_byte_identical(self, tmp_path, image_dir, stack):
        manifest, _ = ten_row_manifest(tmp_path, image_dir)
        rows = read_manifest(manifest, images_root=image_dir)
        p1, p2 = tmp_path / "a.pcf1", tmp_path / "b.pcf1"
        export_manifest(rows, stack, p1, log_stream=None)
        export_manifest(rows, stack, p2, log_stream=None)
        assert p1.read_bytes() == p2.read_bytes()

    def test_byte_layout_matches_engine_writer(self, tmp_path, image_dir, stack):
        manifest, _ = ten_row_manifest(tmp_path, image_dir)
        rows = read_manifest(manifest, images_root=image_dir)
        ours = tmp_path / "exporter.pcf1"
        export_manifest(rows, stack, ours, log_stream=None)
        _, samples = dataio.read_dataset(ours)
        theirs = tmp_path / "engine.pcf1"
        dataio.write_dataset(samples, theirs)
        assert ours.read_bytes() == theirs.read_bytes()

    def test_unlabeled_manifest_sets_flag_off(self, tmp_path, image_dir, stack):
        manifest, _ = ten_row_manifest(tmp_path, image_dir, with_category=False)
        rows = read_manifest(manifest, images_root=image_dir)
        out = tmp_path / "u.pcf1"
        export_manifest(rows, stack, out, log_stream=None)
        header, samples = dataio.read_dataset(out)
        assert not header.has_labels
        assert all(s.label is None for s in samples)

    def test_undecodable_image_skips_whole_sample(self, tmp_path, image_dir,
                                                  stack):
        rows = [
            {"id": "good-0", "claim": "a", "claim_image": "img0.png",
             "document": "b", "document_image": "img1.png",
             "category": "Refute"},
            {"id": "bad-1", "claim": "a", "claim_image": "broken.png",
             "document": "b", "document_image": "img2.png",
             "category": "Refute"},
            {"id": "good-2", "claim": "a", "claim_image": "img3.png",
             "document": "b", "document_image": "img4.png",
             "category": "Support_Text"},
        ]
        manifest = write_manifest(tmp_path / "m.tsv", rows, COLUMNS)
        parsed = read_manifest(manifest, images_root=image_dir)
        out = tmp_path / "skip.pcf1"
        log = io.StringIO()
        result = export_manifest(parsed, stack, out, batch_size=2, log_stream=log)
        assert result.written == 2
        assert [sid for sid, _ in result.skipped] == ["bad-1"]
        assert "bad-1" in log.getvalue()

        header, samples = dataio.read_dataset(out)   # no partial record
        assert header.sample_count == 2
        assert [s.sample_id for s in samples] == ["good-0", "good-2"]

    def test_empty_text_logged_and_loadable(self, tmp_path, image_dir, stack):
        rows = [{"id": "e", "claim": "   ", "claim_image": "img0.png",
                 "document": "real words", "document_image": "img1.png",
                 "category": "Refute"}]
        manifest = write_manifest(tmp_path / "m.tsv", rows, COLUMNS)
        parsed = read_manifest(manifest, images_root=image_dir)
        out = tmp_path / "e.pcf1"
        log = io.StringIO()
        result = export_manifest(parsed, stack, out, log_stream=log)
        assert result.empty_texts == ["e"]
        _, samples = dataio.read_dataset(out)
        assert samples[0].claim_text.length == 2  # special tokens only

    def test_truncated_export_rejected_by_engine(self, tmp_path, image_dir,
                                                 stack):
        manifest, _ = ten_row_manifest(tmp_path, image_dir)
        rows = read_manifest(manifest, images_root=image_dir)
        out = tmp_path / "t.pcf1"
        export_manifest(rows[:3], stack, out, log_stream=None)
        raw = out.read_bytes()
        out.write_bytes(raw[:-7])
        with pytest.raises(DatasetFormatError):
            dataio.read_dataset(out)
