"""The assembled network: localizer -> six-region alignment -> hand features."""

import numpy as np

from handid.alignment import Aligner, Localizer, localizer_input, resize
from handid.config import TrainConfig
from handid.features import FEATURE_TYPES, HandFeatureNet
from handid.regions import N_KEYPOINTS


class HandPipeline:
    def __init__(self, config: TrainConfig, n_classes, rng=None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.config = config
        self.n_classes = n_classes
        self.localizer = Localizer(rng, config.channels, config.ln_input_size, config.ln_channels)
        self.aligner = Aligner(config.tps_reg, config.palm_roi, config.finger_roi)
        self.net = HandFeatureNet(
            rng, n_classes, config.em_kind, config.channels, config.palm_roi, config.finger_roi,
            config.backbone_channels, config.palm_fc_dim, config.finger_fc_dim, config.em_filters,
        )

    def modules(self):
        return {"localizer": self.localizer, "net": self.net}

    def named_parameters(self):
        return [(p.name, p) for m in self.modules().values() for p in m.parameters()]

    def named_buffers(self):
        return [b for m in self.modules().values() for b in m.buffers()]

    def train(self, mode=True):
        self.localizer.train(mode)
        self.net.train(mode)

    def ln_input(self, images):
        c = self.config
        return localizer_input(images, c.ln_input_size, c.ln_norm_mean, c.ln_norm_std)

    def align_input(self, images):
        return resize(images, self.config.align_input_size)

    def predict_keypoints(self, images):
        """(N,C,S,S) images -> (N, 42, 2) keypoints."""
        out = self.localizer.forward(self.ln_input(images))
        return out.reshape(-1, N_KEYPOINTS, 2)

    def forward(self, images, keypoints=None):
        """Full forward pass; ``keypoints`` overrides the localizer output.

        Returns (keypoints, rois, embeddings).
        """
        kp = self.predict_keypoints(images) if keypoints is None else keypoints
        rois = self.aligner.forward(self.align_input(images), kp)
        return kp, rois, self.net.embed(rois)

    def embed(self, images, batch=64, feature_types=FEATURE_TYPES):
        """Eval-mode embeddings {feature type: (N, D)} in input order."""
        was = self.net.training
        self.train(False)
        parts = {m: [] for m in feature_types}
        try:
            for s in range(0, len(images), batch):
                _, _, emb = self.forward(images[s:s + batch])
                for m in feature_types:
                    parts[m].append(emb[m])
        finally:
            self.train(was)
        return {m: np.concatenate(v, axis=0) for m, v in parts.items()}
