"""
alpha-SMC Lab - Flask Backend
HTTP API for builtin models, exact oracles, mixing constants and experiment jobs
"""
import logging
import math
import os

import numpy as np
from flask import Flask, request, jsonify
from flask_cors import CORS

from batch_processor import BatchProcessor
from experiment_config import ExperimentConfig
from graph_engine import (
    DEFAULT_MIXING_METHOD, ConnectivityKind, ConnectivitySpec, alon_friedman_limit, build_matrix,
    circulant_mixing_constant, mixing_constant,
)
from model_manager import ModelManager
from oracle_engine import OracleEngine
from rng_streams import StreamFactory, StreamPurpose

logger = logging.getLogger(__name__)

# Initialize Flask app
app = Flask(__name__)
CORS(app)

# Configuration
app.config['MAX_CONTENT_LENGTH'] = 1 * 1024 * 1024  # configs are small JSON documents
MAX_GRAPHS = 100

# Initialize components
model_manager = ModelManager()
batch_processor = BatchProcessor()


def _error(e: Exception):
    """ValueError subclasses are client errors, anything else is a server error"""
    status = 400 if isinstance(e, ValueError) else 500
    if status == 500:
        logger.exception("Request failed")
    return jsonify({'error': str(e)}), status


# ==================== Model API Routes ====================

@app.route('/api/models', methods=['GET'])
def list_models():
    """Get list of all builtin models with their default parameters"""
    return jsonify({'models': model_manager.get_model_list()})


@app.route('/api/models/<tag>', methods=['GET'])
def get_model(tag):
    """Get information about a specific model"""
    info = model_manager.get_model_info(tag)
    if info is None:
        return jsonify({'error': 'Model not found'}), 404
    return jsonify(info)


# ==================== Oracle and Mixing API Routes ====================

@app.route('/api/oracle', methods=['POST'])
def compute_oracle():
    """
    Exact oracle records

    Request body (JSON):
        - model: builtin tag
        - params: parameter overrides (optional)
        - T: horizon
        - C: connectivity, omitted or null for the bootstrap limit
        - phi: list of test-function names
    """
    try:
        body = request.get_json(silent=True) or {}
        if 'model' not in body:
            raise ValueError("Missing 'model'")
        params = dict(body.get('params') or {})
        if 'T' in body:
            params['T'] = body['T']
        model = ModelManager.make_builtin(body['model'], params)
        c = body.get('C')
        engine = OracleEngine(model, body.get('phi', ['one']), C=math.inf if c is None else float(c))
        engine.run()
        records = engine.export_records()
        for record in records:
            if record['C'] == 'inf':
                record['C'] = None
        return jsonify({'records': records})
    except Exception as e:
        return _error(e)


@app.route('/api/mixing', methods=['POST'])
def compute_mixing():
    """
    Mixing constants of generated connectivity matrices

    Request body (JSON):
        - n, C: size and connectivity
        - kind: connectivity kind (default 'fixed-regular')
        - graphs: number of matrices (default 1)
        - seed: root seed (default 0)
        - method: 'lanczos' (default) or 'power'
    """
    try:
        body = request.get_json(silent=True) or {}
        n, c = int(body['n']), int(body['C'])
        graphs = int(body.get('graphs', 1))
        if not 1 <= graphs <= MAX_GRAPHS:
            raise ValueError(f"graphs must lie in [1, {MAX_GRAPHS}]")
        seed = int(body.get('seed', 0))
        spec = ConnectivitySpec(ConnectivityKind(body.get('kind', 'fixed-regular')), C=c)
        values = []
        for graph in range(graphs):
            rng = StreamFactory(seed, graph).stream(0, StreamPurpose.GRAPH)
            values.append(mixing_constant(build_matrix(spec, n, rng), seed=graph,
                                          method=body.get('method', DEFAULT_MIXING_METHOD)))
        response = {'n': n, 'C': c, 'kind': spec.kind.value, 'lambda': values,
                    'median': float(np.median(values))}
        if spec.kind in (ConnectivityKind.FIXED_REGULAR, ConnectivityKind.PER_STEP_REGULAR):
            response['alon_friedman'] = alon_friedman_limit(c)
        if spec.kind is ConnectivityKind.LOCAL_EXCHANGE:
            response['circulant_exact'] = circulant_mixing_constant(n, c)
        return jsonify(response)
    except KeyError as e:
        return jsonify({'error': f'Missing field: {e}'}), 400
    except Exception as e:
        return _error(e)


@app.route('/api/experiments/validate', methods=['POST'])
def validate_experiment():
    """Validate an experiment config without running it"""
    try:
        config = ExperimentConfig.from_dict(request.get_json(silent=True))
        return jsonify({'valid': True, 'experiment': config.experiment.value,
                        'config_hash': config.config_hash()})
    except ValueError as e:
        return jsonify({'valid': False, 'error': str(e)}), 400


# ==================== Batch Processing API Routes ====================

@app.route('/api/batch/create', methods=['POST'])
def create_batch_job():
    """
    Create an experiment job

    Request body (JSON):
        - config: experiment config document
        - options: {'threads': int, 'out_dir': str} (optional)
    """
    try:
        body = request.get_json(silent=True) or {}
        if 'config' not in body:
            return jsonify({'error': 'No config provided'}), 400
        job_id = batch_processor.create_job(body['config'], body.get('options'))
        job = batch_processor.get_job(job_id)
        return jsonify({
            'job_id': job_id,
            'job_type': job['job_type'],
            'config_hash': job['config_hash'],
            'status': 'pending',
        })
    except Exception as e:
        return _error(e)


@app.route('/api/batch/<job_id>/process', methods=['POST'])
def process_batch_job(job_id):
    """Run an experiment job"""
    try:
        if not batch_processor.get_job(job_id):
            return jsonify({'error': 'Job not found'}), 404
        return jsonify(batch_processor.process_experiment_batch(job_id))
    except Exception as e:
        return _error(e)


@app.route('/api/batch/<job_id>/cancel', methods=['POST'])
def cancel_batch_job(job_id):
    """Cancel a pending or running job"""
    if batch_processor.cancel_job(job_id):
        return jsonify({'success': True, 'message': f'Job {job_id} cancelled'})
    return jsonify({'error': 'Job not found or already finished'}), 404


@app.route('/api/batch/<job_id>', methods=['GET'])
def get_batch_job(job_id):
    """Get batch job status and results"""
    job = batch_processor.get_job(job_id)
    if not job:
        return jsonify({'error': 'Job not found'}), 404
    return jsonify(job)


@app.route('/api/batch/<job_id>', methods=['DELETE'])
def delete_batch_job(job_id):
    """Delete a batch job"""
    if batch_processor.delete_job(job_id):
        return jsonify({'success': True, 'message': f'Job {job_id} deleted'})
    return jsonify({'error': 'Job not found'}), 404


@app.route('/api/batch/<job_id>/export', methods=['POST'])
def export_batch_results(job_id):
    """Export batch job results to a JSON file"""
    try:
        body = request.get_json(silent=True) or {}
        result = batch_processor.export_results(job_id, body.get('output_dir'))
        if 'error' in result:
            return jsonify(result), 404
        return jsonify(result)
    except Exception as e:
        return _error(e)


@app.route('/api/batch', methods=['GET'])
def list_batch_jobs():
    """List all batch jobs"""
    return jsonify(batch_processor.list_jobs())


# ==================== Main Entry Point ====================

if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    port = int(os.environ.get('PORT', 7860))
    logger.info("Starting alpha-SMC Lab at http://localhost:%d", port)
    app.run(host='0.0.0.0', port=port, debug=False)
