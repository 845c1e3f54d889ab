from fusenet.preproc import PreprocConfig
from fusenet.segnet import SegNetConfig
from fusenet.synthlab import PhantomSpec


def tiny_phantom_spec(**kwargs: object) -> PhantomSpec:
    """ 16 voxel phantoms at 5 mm. """
    return PhantomSpec(dims=(16, 16, 16), spacing_mm=(5., 5., 5.), **kwargs)  # type: ignore


def tiny_preproc() -> PreprocConfig:
    return PreprocConfig(target_spacing_mm=(5., 5., 5.), target_dims=(16, 16, 16))


def tiny_segnet_config(seed: int = 0) -> SegNetConfig:
    """ Six tap channels, two per stack. """
    return SegNetConfig(stack_channels=(2, 2, 2), dense_layers_per_stack=1,
                        init_channels=2, skip_channels=2, prior_grid=2, seed=seed)
