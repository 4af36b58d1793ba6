"""Hand identification from regressed keypoints and multi-region TPS alignment."""

__version__ = "0.1.0"

# on-disk format versions recorded in provenance files
FORMAT_VERSIONS = {
    "tensor": "HT01",
    "embedding": "HFE1",
    "checkpoint": "HCK1",
    "keypoints_csv": "1",
    "manifest_csv": "1",
    "score_csv": "1",
}
