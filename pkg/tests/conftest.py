from pijepa.models import EncoderConfig, PredictorConfig


def toy_encoder(channels: int = 2) -> EncoderConfig:
    return EncoderConfig(
        height=16,
        width=16,
        in_channels=channels,
        patch=2,
        d_model=16,
        fourier_layers=1,
        fourier_hidden=8,
        modes=4,
        attn_layers=1,
        heads=2,
    )


def toy_predictor(count: int = 1) -> PredictorConfig:
    return PredictorConfig(depth=1, heads=2, count=count)
