"""
MHG-GNN Pipeline Orchestrator
Command line for grammar extraction, training, encoding, decoding and
property-prediction evaluation, with run tracking and Slack notifications
"""

import argparse
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pytz
from dotenv import load_dotenv

from autodiff import NoiseSource
from checkpoint import load_checkpoint, save_checkpoint
from downstream import (RADIUS_SET, FingerprintMatrix, LabeledDataset, compute_targets, ecfp_matrix,
                        evaluate_fingerprints, fingerprint, random_fingerprint, scan_radii,
                        split_dataset, write_report)
from errors import ConfigError, DataError, InvalidMolecule, MhgError, ParseError
from fileutil import atomic_write_text
from grammar import derive, extract_grammar, grammar_hash, load_grammar
from hypergraph import canonical_form, to_hypergraph
from model import DecodeTruncated, decode_generate
from molgraph import Molecule, read_corpus, write_corpus, write_smiles
from run_ledger import RunLedger
from slack_notifier import SlackNotifier
from training import TrainingConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


@dataclass
class CommandResult:
    metrics: Dict[str, float] = field(default_factory=dict)
    summary: str = ''
    exit_code: int = EXIT_OK


class CommandParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"❌ {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def load_config() -> Dict:
    """Settings from the environment (and .env when present)"""
    load_dotenv()
    raw_seed = os.getenv('MHG_DEFAULT_SEED', '0')
    try:
        default_seed = int(raw_seed)
    except ValueError:
        raise ConfigError(f'MHG_DEFAULT_SEED must be an integer, got {raw_seed!r}') from None
    timezone = os.getenv('MHG_TIMEZONE', 'UTC')
    if timezone not in pytz.all_timezones_set:
        raise ConfigError(f'MHG_TIMEZONE is not a known timezone: {timezone!r}')
    return {
        'db_path': os.getenv('MHG_DB_PATH', 'mhg_runs.db'),
        'timezone': timezone,
        'slack_webhook_url': os.getenv('SLACK_WEBHOOK_URL'),
        'default_seed': default_seed,
    }


def _molecules(path: str) -> List[Molecule]:
    return [m for m, _ in read_corpus(path)]


def _labeled(path: str) -> LabeledDataset:
    records = read_corpus(path)
    missing = [i + 1 for i, (_, value) in enumerate(records) if value is None]
    if missing:
        raise DataError(f'{path}: record(s) {missing[:5]} have no property value')
    return LabeledDataset([m for m, _ in records], np.array([v for _, v in records]))


def _parse_radii(text: str) -> List[int]:
    try:
        radii = sorted({int(part) for part in text.split(',') if part.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f'radii must be comma-separated integers, got {text!r}')
    if not radii or min(radii) < 1:
        raise argparse.ArgumentTypeError('radii must be positive integers')
    return radii


def _positive(kind):
    def parse(text: str):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f'expected a number, got {text!r}')
        if not value > 0:
            raise argparse.ArgumentTypeError(f'must be positive, got {text}')
        return value
    return parse



class MhgPipeline:
    def __init__(self, config: Dict):
        self.config = config
        self.ledger = RunLedger(config.get('db_path', 'mhg_runs.db'), config.get('timezone', 'UTC'))

        slack_url = config.get('slack_webhook_url')
        self.slack = SlackNotifier(slack_url) if slack_url else None

    def _seed(self, args) -> Optional[int]:
        if not hasattr(args, 'seed'):
            return None
        if args.seed is None:
            args.seed = self.config.get('default_seed', 0)
            print(f"🌱 No --seed given; using default seed {args.seed}")
        return args.seed

    def run(self, args) -> int:
        """Run one subcommand inside a ledger entry; MhgError and I/O failures exit with 2"""
        seed = self._seed(args)
        if getattr(args, 'split_seed', 0) is None:
            args.split_seed = self.config.get('default_seed', 0)
            print(f"🌱 No --split-seed given; using default seed {args.split_seed}")

        arguments = {k: v for k, v in vars(args).items() if k not in ('handler', 'command')}
        run_id = self.ledger.start_run(args.command, seed, arguments)

        try:
            result: CommandResult = args.handler(self, args)
        except (MhgError, OSError) as e:
            message = f'{type(e).__name__}: {e}'
            print(f"❌ {args.command} failed: {message}", file=sys.stderr)
            self.ledger.finish_run(run_id, 'failed', message)
            if self.slack:
                self.slack.notify_error(message, context=f'{args.command} (run {run_id})')
            return EXIT_DATA

        for name, value in result.metrics.items():
            self.ledger.record_metric(run_id, name, value)
        status = 'ok' if result.exit_code == EXIT_OK else 'failed'
        self.ledger.finish_run(run_id, status, result.summary)

        if self.slack:
            if status == 'ok':
                self.slack.notify_run_finished(args.command, result.metrics, result.summary)
            else:
                self.slack.notify_error(result.summary, context=f'{args.command} (run {run_id})')
        return result.exit_code

    # -- subcommands -------------------------------------------------------

    def extract_grammar(self, args) -> CommandResult:
        corpus = _molecules(args.input)
        grammar, sequences = extract_grammar(corpus)
        atomic_write_text(args.out, grammar.to_text())
        summary = (f'{len(grammar)} rules ({len(grammar.start_rule_ids)} start) '
                   f'from {len(corpus)} molecules')
        print(f"✅ Extracted {summary} -> {args.out}")
        return CommandResult({
            'molecules': len(corpus),
            'rules': len(grammar),
            'start_rules': len(grammar.start_rule_ids),
            'mean_sequence_length': float(np.mean([len(s) for s in sequences])),
        }, summary)

    def train(self, args) -> CommandResult:
        grammar = load_grammar(args.grammar)
        corpus = _molecules(args.corpus)
        overrides = {'seed': args.seed, 'max_epochs': args.epochs}
        if args.config:
            config = TrainingConfig.from_file(args.config, **overrides)
        else:
            config = TrainingConfig(**{k: v for k, v in overrides.items() if v is not None})

        print(f"🧠 Training on {len(corpus)} molecules, {len(grammar)} rules, "
              f"radius {config.radius}, {config.max_epochs} epochs")
        params, report = train(corpus, grammar, config, verbose=args.verbose)
        save_checkpoint(args.out, params, grammar_hash(args.grammar), extra={'seed': config.seed})
        if args.report:
            report.write_csv(args.report)

        summary = (f'loss {report.loss[0]:.4f} -> {report.loss[-1]:.4f}, '
                   f'accuracy {report.accuracy[-1]:.3f}')
        print(f"✅ Trained: {summary} -> {args.out}")
        return CommandResult({
            'epochs': report.epochs,
            'first_loss': report.loss[0],
            'final_loss': report.loss[-1],
            'final_accuracy': report.accuracy[-1],
            'final_learning_rate': report.learning_rate[-1],
            'skipped_batches': report.skipped_batches,
        }, summary)

    def encode(self, args) -> CommandResult:
        params, header = load_checkpoint(args.ckpt)
        corpus = _molecules(args.input)
        fp = fingerprint(corpus, params, provenance=f"mhg-gnn:{header.get('grammar_hash', '')[:12]}")
        fp.write_csv(args.out)
        print(f"✅ Encoded {len(corpus)} molecules into {fp.dim}-wide fingerprints -> {args.out}")
        return CommandResult({'molecules': len(corpus), 'width': fp.dim},
                             f'{len(corpus)} x {fp.dim} fingerprints')

    def decode(self, args) -> CommandResult:
        grammar = load_grammar(args.grammar)
        params, _ = load_checkpoint(args.ckpt, expected_grammar_hash=grammar_hash(args.grammar))
        latent = params.config.latent_dim
        noise = NoiseSource(args.seed)

        if args.z_file:
            try:
                latents = np.loadtxt(args.z_file, delimiter=',', ndmin=2)
            except ValueError as e:
                raise DataError(f'{args.z_file}: latent rows must be comma-separated numbers ({e})') from e
            if latents.shape[1] != latent or not np.isfinite(latents).all():
                raise DataError(f'{args.z_file}: latent rows need {latent} finite values each, '
                                f'got width {latents.shape[1]}')
        else:
            latents = np.array([noise.normal('decode.z', i, latent) for i in range(args.sample)])
            latents = latents.reshape(args.sample, latent)

        lines, valid, truncated, invalid = [], 0, 0, 0
        for i, z in enumerate(latents):
            rng = noise.generator('decode.sample', i) if args.mode == 'sample' else None
            try:
                result = decode_generate(z, grammar, params, mode=args.mode, temperature=args.temperature,
                                         max_len=args.max_len, rng=rng)
            except InvalidMolecule:
                invalid += 1
                continue
            if isinstance(result, DecodeTruncated):
                truncated += 1
                continue
            valid += 1
            lines.append(write_smiles(result) + '\n')

        atomic_write_text(args.out, ''.join(lines))
        unique = len(set(lines))
        summary = f'valid={valid} truncated={truncated}'
        print(summary)
        print(f"📊 {unique} unique molecule(s) -> {args.out}")
        return CommandResult({
            'decoded': len(latents),
            'valid': valid,
            'truncated': truncated,
            'invalid': invalid,
            'unique': unique,
        }, summary, EXIT_OK if invalid == 0 else EXIT_DATA)

    def roundtrip(self, args) -> CommandResult:
        grammar = load_grammar(args.grammar)
        corpus = _molecules(args.input)
        matched, unparsed = 0, 0
        for m in corpus:
            try:
                derived = derive(grammar.parse(m), grammar)
            except ParseError:
                unparsed += 1
                continue
            if canonical_form(to_hypergraph(derived)) == canonical_form(to_hypergraph(m)):
                matched += 1

        rate = matched / len(corpus) * 100 if corpus else 0.0
        summary = f'roundtrip={matched}/{len(corpus)} ({rate:.1f}%)'
        emoji = '✅' if matched == len(corpus) else '❌'
        print(f"{emoji} {summary}")
        if unparsed:
            print(f"⚠️  {unparsed} molecule(s) do not parse under this grammar")
        return CommandResult({
            'molecules': len(corpus),
            'matched': matched,
            'unparsed': unparsed,
            'roundtrip_rate': rate,
        }, summary, EXIT_OK if matched == len(corpus) else EXIT_DATA)

    def evaluate(self, args) -> CommandResult:
        fp = FingerprintMatrix.read_csv(args.fp, provenance='mhg-gnn')
        dataset = split_dataset(_labeled(args.labels), seed=args.split_seed)
        if len(fp.values) != len(dataset):
            raise DataError(f'{args.fp} has {len(fp.values)} rows but {args.labels} has {len(dataset)} records')

        _, rows = evaluate_fingerprints(fp, dataset, 'mhg-gnn')
        if args.baselines:
            _, ecfp_rows = evaluate_fingerprints(ecfp_matrix(dataset.molecules), dataset, 'ecfp6')
            random_fp = random_fingerprint(dataset.molecules, fp.dim, seed=args.split_seed)
            _, random_rows = evaluate_fingerprints(random_fp, dataset, 'random')
            rows += ecfp_rows + random_rows
        write_report(args.out, rows)

        metrics = {f'{row.method}_{row.split}_r2': row.r2 for row in rows}
        for row in rows:
            if row.split == 'test':
                print(f"📊 {row.method:<8} test R² = {row.r2:.4f}")
        return CommandResult(metrics, f"mhg-gnn test R² {metrics['mhg-gnn_test_r2']:.4f}")

    def radius_scan(self, args) -> CommandResult:
        grammar = load_grammar(args.grammar)
        ghash = grammar_hash(args.grammar)
        corpus = _molecules(args.corpus)
        dataset = split_dataset(_labeled(args.labels), seed=args.split_seed)

        fingerprints = {}
        for radius in args.radii:
            overrides = {'seed': args.seed, 'radius': radius, 'max_epochs': args.epochs}
            if args.config:
                config = TrainingConfig.from_file(args.config, **overrides)
            else:
                config = TrainingConfig(**{k: v for k, v in overrides.items() if v is not None})
            print(f"🧠 radius {radius}: training {config.max_epochs} epochs")
            params, report = train(corpus, grammar, config)
            if args.ckpt_dir:
                save_checkpoint(os.path.join(args.ckpt_dir, f'radius{radius}.ckpt'), params, ghash,
                                extra={'seed': config.seed})
            fingerprints[radius] = fingerprint(dataset.molecules, params)

        scan = scan_radii(fingerprints, dataset)
        write_report(args.out, scan.report_rows())
        for radius, score in sorted(scan.validation_r2.items()):
            marker = ' <- selected' if radius == scan.selected else ''
            print(f"📊 radius {radius}: validation R² = {score:.4f}{marker}")
        summary = f'selected radius {scan.selected}, test R² {scan.test_r2:.4f}'
        print(f"✅ {summary}")

        metrics = {f'val_r2_radius{r}': s for r, s in scan.validation_r2.items()}
        metrics.update({'selected_radius': scan.selected, 'test_r2': scan.test_r2})
        return CommandResult(metrics, summary)

    def make_labels(self, args) -> CommandResult:
        corpus = _molecules(args.input)
        values = compute_targets(corpus, args.target)
        write_corpus(args.out, corpus, list(values))
        print(f"✅ Wrote {len(corpus)} {args.target} labels -> {args.out}")
        return CommandResult({'molecules': len(corpus), 'mean_target': float(np.mean(values))},
                             f'{len(corpus)} {args.target} labels')


def build_parser() -> CommandParser:
    parser = CommandParser(prog='mhg_cli.py', description='MHG-GNN molecular autoencoder pipeline')
    sub = parser.add_subparsers(dest='command', metavar='command', required=True)

    p = sub.add_parser('extract-grammar', help='induce a hypergraph grammar from a corpus')
    p.add_argument('--in', dest='input', required=True, help='corpus file (SMILES<TAB>value per line)')
    p.add_argument('--out', required=True, help='grammar file to write')
    p.set_defaults(handler=MhgPipeline.extract_grammar)

    p = sub.add_parser('train', help='train the autoencoder')
    p.add_argument('--corpus', required=True, help='training corpus file')
    p.add_argument('--grammar', required=True, help='grammar file from extract-grammar')
    p.add_argument('--config', help='key = value training config file')
    p.add_argument('--out', required=True, help='checkpoint file to write')
    p.add_argument('--report', help='optional per-epoch CSV report')
    p.add_argument('--epochs', type=int, help='override max_epochs')
    p.add_argument('--seed', type=int, help='random seed (default MHG_DEFAULT_SEED)')
    p.add_argument('--verbose', action='store_true', help='print one line per epoch')
    p.set_defaults(handler=MhgPipeline.train)

    p = sub.add_parser('encode', help='write fingerprints for a corpus')
    p.add_argument('--ckpt', required=True, help='trained checkpoint')
    p.add_argument('--in', dest='input', required=True, help='corpus file')
    p.add_argument('--out', required=True, help='fingerprint CSV to write')
    p.set_defaults(handler=MhgPipeline.encode)

    p = sub.add_parser('decode', help='decode latents into molecules')
    p.add_argument('--ckpt', required=True, help='trained checkpoint')
    p.add_argument('--grammar', required=True, help='grammar the checkpoint was trained on')
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--z-file', help='CSV of latent vectors, one per row')
    source.add_argument('--sample', type=_positive(int), help='decode N latents drawn from N(0, I)')
    p.add_argument('--out', required=True, help='SMILES file to write')
    p.add_argument('--mode', choices=('greedy', 'sample'), default='greedy', help='decode strategy')
    p.add_argument('--temperature', type=_positive(float), default=1.0, help='softmax temperature for sample mode')
    p.add_argument('--max-len', type=_positive(int), default=200, help='rule budget per molecule')
    p.add_argument('--seed', type=int, help='random seed (default MHG_DEFAULT_SEED)')
    p.set_defaults(handler=MhgPipeline.decode)

    p = sub.add_parser('roundtrip', help='parse and re-derive every corpus molecule')
    p.add_argument('--grammar', required=True, help='grammar file')
    p.add_argument('--in', dest='input', required=True, help='corpus file')
    p.set_defaults(handler=MhgPipeline.roundtrip)

    p = sub.add_parser('eval', help='ridge regression on fingerprints with 0.6/0.2/0.2 splits')
    p.add_argument('--fp', required=True, help='fingerprint CSV from encode')
    p.add_argument('--labels', required=True, help='labeled corpus aligned row by row with --fp')
    p.add_argument('--split-seed', type=int, help='split seed (default MHG_DEFAULT_SEED)')
    p.add_argument('--out', required=True, help='report CSV to write')
    p.add_argument('--no-baselines', dest='baselines', action='store_false',
                   help='skip the ECFP6 and random baselines')
    p.set_defaults(handler=MhgPipeline.evaluate)

    p = sub.add_parser('radius-scan', help='train per radius and select on validation R²')
    p.add_argument('--radii', type=_parse_radii, default=list(RADIUS_SET), help='comma-separated radii')
    p.add_argument('--corpus', required=True, help='training corpus file')
    p.add_argument('--grammar', required=True, help='grammar file')
    p.add_argument('--config', help='key = value training config file')
    p.add_argument('--labels', required=True, help='labeled corpus to evaluate on')
    p.add_argument('--split-seed', type=int, help='split seed (default MHG_DEFAULT_SEED)')
    p.add_argument('--epochs', type=int, help='override max_epochs')
    p.add_argument('--seed', type=int, help='random seed (default MHG_DEFAULT_SEED)')
    p.add_argument('--ckpt-dir', help='directory to keep one checkpoint per radius')
    p.add_argument('--out', required=True, help='report CSV to write')
    p.set_defaults(handler=MhgPipeline.radius_scan)

    p = sub.add_parser('make-labels', help='label a corpus with a computed property')
    p.add_argument('--in', dest='input', required=True, help='corpus file')
    p.add_argument('--target', choices=('molecular_weight', 'ring_count'), default='molecular_weight',
                   help='property to compute')
    p.add_argument('--out', required=True, help='labeled corpus to write')
    p.set_defaults(handler=MhgPipeline.make_labels)

    p = sub.add_parser('dashboard', help='show recorded runs')
    p.add_argument('view', nargs='?', choices=('runs', 'stats'), default='runs', help='what to show')
    p.add_argument('--limit', type=int, default=10, help='number of recent runs')

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config()
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE

    if args.command == 'dashboard':
        if not os.path.exists(config['db_path']):
            print(f"❌ Database not found: {config['db_path']}")
            print("Run any pipeline command at least once to create it")
            return EXIT_DATA
        ledger = RunLedger(config['db_path'], config['timezone'])
        if args.view == 'stats':
            ledger.display_stats()
        else:
            ledger.display_dashboard(args.limit)
        return EXIT_OK

    return MhgPipeline(config).run(args)


if __name__ == "__main__":
    sys.exit(main())
