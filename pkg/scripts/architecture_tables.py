"""Print layer-by-layer output shapes and parameter counts of the three networks."""
from gancnn.blocks import build_classifier, build_discriminator, build_generator, count_params


def show(name, model):
    counts = count_params(model)
    print(f"{name} (input {model.input_shape})")
    for i, (layer, shape, n) in enumerate(zip(model.layers, model.infer_shapes(), counts.per_layer), 1):
        print(f"  {i:>2} {layer.kind:<18} {str(tuple(shape)):<20} {n:>12,}")
    print(f"  total {counts.total:,}\n")


if __name__ == "__main__":
    show("generator", build_generator())
    show("discriminator", build_discriminator())
    show("classifier", build_classifier())
