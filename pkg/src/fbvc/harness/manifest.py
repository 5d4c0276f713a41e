"""Tab-separated utterance manifests: ``utt_id speaker_id sex path split``."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from ..dsp import Waveform, read_wav

SPLITS = ("train", "validation", "trial")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    utt_id: str
    speaker_id: str
    sex: str
    path: str
    split: str


class Manifest:
    """Rows plus the directory relative paths are resolved against.

    Speaker roles follow from the splits: speakers with ``validation``
    utterances are conversion targets, speakers with ``trial`` utterances are
    imposters / conversion sources, and the remaining ``train``-only speakers
    are background data for the verifier.
    """

    def __init__(self, rows, base_dir="."):
        self.rows = list(rows)
        self.base_dir = Path(base_dir)
        seen = set()
        for row in self.rows:
            if row.utt_id in seen:
                raise ManifestError(f"duplicate utterance id {row.utt_id!r}")
            seen.add(row.utt_id)
            if row.split not in SPLITS:
                raise ManifestError(f"{row.utt_id}: unknown split {row.split!r}")
        self._by_id = {row.utt_id: row for row in self.rows}

    @classmethod
    def read(cls, path, check_paths: bool = True) -> "Manifest":
        path = Path(path)
        rows = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise ManifestError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
            rows.append(ManifestRow(*fields))
        manifest = cls(rows, base_dir=path.parent)
        if check_paths:
            missing = [r.utt_id for r in rows if not manifest.resolve(r.utt_id).exists()]
            if missing:
                raise ManifestError(f"{len(missing)} audio files missing, first: {missing[:5]}")
        return manifest

    def write(self, path) -> None:
        lines = ["\t".join([r.utt_id, r.speaker_id, r.sex, r.path, r.split]) for r in self.rows]
        Path(path).write_text("\n".join(lines) + "\n")

    def __getitem__(self, utt_id) -> ManifestRow:
        return self._by_id[utt_id]

    def __contains__(self, utt_id) -> bool:
        return utt_id in self._by_id

    def resolve(self, utt_id) -> Path:
        p = Path(self._by_id[utt_id].path)
        return p if p.is_absolute() else self.base_dir / p

    def load(self, utt_id) -> Waveform:
        return read_wav(self.resolve(utt_id))

    def select(self, speaker_id=None, split=None) -> list:
        return [r for r in self.rows
                if (speaker_id is None or r.speaker_id == speaker_id) and (split is None or r.split == split)]

    def speakers(self, split=None) -> list:
        out = []
        for r in self.rows:
            if (split is None or r.split == split) and r.speaker_id not in out:
                out.append(r.speaker_id)
        return out

    def sex_of(self, speaker_id) -> str:
        for r in self.rows:
            if r.speaker_id == speaker_id:
                return r.sex
        raise ManifestError(f"unknown speaker {speaker_id!r}")

    @property
    def targets(self) -> list:
        return self.speakers("validation")

    @property
    def imposters(self) -> list:
        return self.speakers("trial")
