"""Argument handling, JSON configs, split manifests and the exit-code contract shared by all verbs."""
import os
import sys
import argparse
import multiprocessing
from collections import namedtuple

from tqdm import tqdm

from aenet import utils
from aenet.config import IMAP_PROC_CHUNK_QTY, SPLIT_NAMES, MANIFEST_FILE, ORGANS, IMAGE_SUBDIR, IMAGE_EXTS
from aenet.errors import AENetError, UsageError, DataError, EXIT_OK

NORM_GLOBAL = 'global'
NORM_INDIVIDUAL = 'individual'
NORM_MODES = [NORM_GLOBAL, NORM_INDIVIDUAL]

ManifestEntry = namedtuple('ManifestEntry', ['image_id', 'organ'])
SplitManifest = namedtuple('SplitManifest', SPLIT_NAMES)

RunConfig = namedtuple('RunConfig',
                       ['data_root', 'manifest', 'cam', 'sam', 'ffb', 'watershed', 'norm_mode',
                        'multi_scale', 'flip', 'train', 'out_dir', 'seed'])


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors with an exception instead of exiting with code 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def add_common_args(parser):
    parser.add_argument('--json_conf', '--config', dest='json_conf', metavar='JSON config',
                        type=str, default=None,
                        help='a JSON file with arguments (sections allowed), explicit flags take precedence')
    parser.add_argument('--seed', metavar='random seed', help='random seed',
                        type=int, default=0)
    parser.add_argument('--workers', metavar='# of workers', help='# of worker processes',
                        type=int, default=1)


def add_bool_arg(parser, name, default, help_text):
    """Add a --<name>/--no_<name> pair."""
    group = parser.add_mutually_exclusive_group()
    group.add_argument(f'--{name}', dest=name, action='store_true', help=help_text)
    group.add_argument(f'--no_{name}', dest=name, action='store_false', help=f'disable: {help_text}')
    parser.set_defaults(**{name: default})


def _explicit_dests(parser, argv):
    explicit = set()
    for action in parser._actions:
        for opt in action.option_strings:
            if any(a == opt or a.startswith(opt + '=') for a in argv):
                explicit.add(action.dest)
    return explicit


def parse_args(parser, argv=None):
    """Parse the command line and merge a JSON config.

    Config keys are argument names, nested objects are sections whose keys are
    merged. Unknown keys and values of a wrong type are usage errors.
    """
    if argv is None:
        argv = sys.argv[1:]
    args = parser.parse_args(argv)
    if args.json_conf is None:
        return args

    conf_file = args.json_conf
    print(f'Reading configuration variables from {conf_file}')
    try:
        add_conf = utils.flatten_sections(utils.read_json(conf_file))
    except (OSError, ValueError) as e:
        raise UsageError(f'Cannot read the configuration file {conf_file}: {e}')

    all_arg_names = vars(args).keys()
    explicit = _explicit_dests(parser, argv)
    for arg_name, arg_val in add_conf.items():
        if arg_name not in all_arg_names:
            raise UsageError(f'Invalid option in the configuration file: {arg_name}')
        arg_default = getattr(args, arg_name)
        exp_type = type(arg_default)
        if arg_default is not None and type(arg_val) != exp_type and \
                not (exp_type is float and type(arg_val) is int):
            raise UsageError(f'Invalid type in the configuration file: {arg_name} expected type: '
                             f'{exp_type.__name__} default {arg_default}')
        if arg_name in explicit:
            print(f'Keeping the command-line value of {arg_name}')
            continue
        print(f'Using {arg_name} from the config')
        setattr(args, arg_name, arg_val)
    return args


def run_main(main_func, argv=None):
    """Run a verb and map exceptions to the exit code."""
    try:
        main_func(argv)
    except AENetError as e:
        utils.sync_out_streams()
        print(f'{type(e).__name__}: {e}', file=sys.stderr)
        return e.exit_code
    return EXIT_OK


def pool_map(func, items, workers=1, desc=None):
    """Map over items in input order, in worker processes when workers > 1."""
    items = list(items)
    if workers <= 1:
        return [func(x) for x in tqdm(items, desc=desc, leave=False)]
    with multiprocessing.Pool(workers) as pool:
        return list(tqdm(pool.imap(func, items, IMAP_PROC_CHUNK_QTY),
                         total=len(items), desc=desc, leave=False))


def manifest_to_json(manifest):
    return {name: [{'id': e.image_id, 'organ': e.organ} for e in getattr(manifest, name)]
            for name in SPLIT_NAMES}


def manifest_from_json(data, source=MANIFEST_FILE):
    splits = {}
    for name in SPLIT_NAMES:
        entries = []
        for e in data.get(name, []):
            try:
                entries.append(ManifestEntry(image_id=str(e['id']), organ=str(e['organ'])))
            except (KeyError, TypeError):
                raise DataError(f'Invalid entry {e} in the split {name} of {source}')
        splits[name] = entries
    return SplitManifest(**splits)


def read_manifest(file_name):
    try:
        data = utils.read_json(file_name)
    except (OSError, ValueError) as e:
        raise DataError(f'Cannot read the split manifest {file_name}: {e}')
    return manifest_from_json(data, file_name)


def write_manifest(file_name, manifest):
    utils.save_json(file_name, manifest_to_json(manifest))


def validate_manifest(manifest, expected_qty=None):
    """Check disjoint splits, known organs, DT organs unseen in training and optional split sizes.

    :param manifest:      SplitManifest
    :param expected_qty:  optional dictionary of split sizes, e.g., MONUSEG_SPLIT_QTY
    """
    seen = {}
    for name in SPLIT_NAMES:
        for e in getattr(manifest, name):
            if e.image_id in seen:
                raise DataError(f'Image {e.image_id} is in both {seen[e.image_id]} and {name} splits')
            seen[e.image_id] = name
            if e.organ not in ORGANS:
                raise DataError(f'Unknown organ {e.organ} of the image {e.image_id}')
    train_organs = {e.organ for e in manifest.train}
    leaked = sorted({e.organ for e in manifest.dt} & train_organs)
    if leaked:
        raise DataError(f'Different-organ split contains training organs: {leaked}')
    if expected_qty is not None:
        for name, qty in expected_qty.items():
            if len(getattr(manifest, name)) != qty:
                raise DataError(f'Split {name} has {len(getattr(manifest, name))} images, expected {qty}')


def find_image(image_dir, image_id):
    for ext in IMAGE_EXTS:
        fn = os.path.join(image_dir, image_id + ext)
        if os.path.exists(fn):
            return fn
    raise DataError(f'No image for {image_id} in {image_dir} (tried {IMAGE_EXTS})')


def list_images(image_dir):
    """Image ids (file names without extensions) of a directory, sorted."""
    if not os.path.isdir(image_dir):
        raise UsageError(f'Not a directory: {image_dir}')
    res = sorted(os.path.splitext(fn)[0] for fn in os.listdir(image_dir)
                 if os.path.splitext(fn)[1].lower() in IMAGE_EXTS)
    return res


def image_dir(data_root):
    return os.path.join(data_root, IMAGE_SUBDIR)


def run_config_from_args(args, train_conf=None):
    """Collect the run-level settings of a parsed command line."""
    return RunConfig(data_root=getattr(args, 'data_root', None),
                     manifest=getattr(args, 'manifest', None),
                     cam=getattr(args, 'cam', True),
                     sam=getattr(args, 'sam', True),
                     ffb=getattr(args, 'ffb', True),
                     watershed=getattr(args, 'watershed', True),
                     norm_mode=getattr(args, 'norm', NORM_GLOBAL),
                     multi_scale=getattr(args, 'multi_scale', False),
                     flip=getattr(args, 'flip', False),
                     train=train_conf,
                     out_dir=getattr(args, 'out_dir', None),
                     seed=args.seed)
