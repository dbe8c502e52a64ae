"""
Safe evaluation of small operator and scalar expressions from configs.

Expressions use Python syntax restricted to numbers, names, ``+ - * / **``,
``@`` (operator product) and the helpers ``dag(x)`` and ``sqrt(x)``.
Names resolve to sparse operators or scalar parameters.  ``*`` between two
operators is also an operator product.
"""

import ast
import math
import operator as _op

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .tensor_core import as_sparse

__all__ = ['evaluate_expression', 'operator_expression', 'scalar_expression']

_BINOPS = {ast.Add: _op.add, ast.Sub: _op.sub, ast.Mult: _op.mul,
           ast.Div: _op.truediv, ast.Pow: _op.pow, ast.MatMult: _op.matmul}


def _dag(x):
    return as_sparse(x.getH()) if sp.issparse(x) else np.conj(x)


def _sqrt(x):
    return np.sqrt(complex(x)) if isinstance(x, complex) else math.sqrt(x)


_FUNCS = {'dag': _dag, 'sqrt': _sqrt, 'conj': np.conj}


def _mul(a, b):
    if sp.issparse(a) and sp.issparse(b):
        return a @ b
    return a * b


def _pow(a, b):
    if sp.issparse(a):
        if not (isinstance(b, int) and b >= 0):
            raise ConfigError('operator powers must be non-negative integers')
        out = sp.identity(a.shape[0], dtype=a.dtype, format='csr')
        for _ in range(b):
            out = out @ a
        return out
    return a ** b


def evaluate_expression(expr, names):
    """Evaluate ``expr`` with ``names`` (str -> scalar or sparse matrix)."""
    try:
        tree = ast.parse(expr, mode='eval')
    except SyntaxError as exc:
        raise ConfigError(f'cannot parse expression {expr!r}: {exc.msg}') from exc

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float, complex)):
            return node.value
        if isinstance(node, ast.Name):
            if node.id == 'I' and 'I' not in names:
                return 1j
            if node.id not in names:
                raise ConfigError(f'unknown name {node.id!r} in {expr!r}')
            return names[node.id]
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            a, b = ev(node.left), ev(node.right)
            if isinstance(node.op, ast.Mult):
                return _mul(a, b)
            if isinstance(node.op, ast.Pow):
                return _pow(a, b)
            if sp.issparse(a) != sp.issparse(b) and isinstance(node.op, (ast.Add, ast.Sub)):
                raise ConfigError(f'cannot add an operator and a scalar in {expr!r}')
            return _BINOPS[type(node.op)](a, b)
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords:
            return _FUNCS[node.func.id](ev(node.args[0]))
        raise ConfigError(f'unsupported syntax {ast.dump(node)[:40]} in {expr!r}')

    return ev(tree)


def operator_expression(expr, operators, params=None):
    """Sparse operator from ``expr`` over the operator table and parameters."""
    names = dict(params or {})
    names.update(operators)
    val = evaluate_expression(expr, names)
    if not sp.issparse(val):
        raise ConfigError(f'expression {expr!r} does not evaluate to an operator')
    return as_sparse(val)


def scalar_expression(expr, params):
    """Complex scalar from ``expr`` over the parameter values."""
    val = evaluate_expression(expr, dict(params))
    if sp.issparse(val):
        raise ConfigError(f'expression {expr!r} evaluates to an operator, expected a scalar')
    return complex(val)
