import torch

from mecd.annotations import MAX_CAPTION_LEN, PAD
from mecd.model import ModelConfig, VGCM, VideoTensors


def toy_config(d=4, heads=2, vocab=20, feature_dim=3, layers=1, **kw):
    return ModelConfig(d_model=d, encoder_layers=layers, decoder_layers=layers, attention_heads=heads,
                       vocab_size=vocab, feature_dim=feature_dim, dropout=0.0, **kw)


def toy_model(seed=0, alpha=None, dtype=torch.float64, **kw):
    torch.manual_seed(seed)
    model = VGCM(toy_config(**kw)).to(dtype).eval()
    if alpha is not None:
        with torch.no_grad():
            model.correction_scale.fill_(alpha)
    return model


def toy_video(n=4, seed=0, vocab=20, feature_dim=3, dtype=torch.float64, vid="toy"):
    g = torch.Generator().manual_seed(seed)

    def tokens(rows):
        ids = torch.randint(5, vocab, (rows, MAX_CAPTION_LEN), generator=g)
        lengths = torch.randint(1, 8, (rows,), generator=g)
        pos = torch.arange(MAX_CAPTION_LEN)
        return torch.where(pos[None] < lengths[:, None], ids, torch.full_like(ids, PAD))

    return VideoTensors(
        vid,
        torch.randn(n, feature_dim, generator=g, dtype=dtype),
        tokens(n),
        tokens(n - 1),
        tokens(n - 1),
        torch.randint(0, 2, (n - 1,), generator=g),
    )
