"""Token-embedding server for the `contextual-backend` provider.

POST {"model": "<hf model name>", "text": "..."} returns
{"tokens": [...], "vectors": [[...], ...], "special": [...]} with the last
hidden layer for every token. Models load on first use.

    python scripts/embedding_server.py --port 8089
"""

import argparse
import json
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from threading import Lock

import torch
from transformers import AutoModel, AutoTokenizer

_models = {}
_lock = Lock()


def load(name):
    with _lock:
        if name not in _models:
            tok = AutoTokenizer.from_pretrained(name)
            model = AutoModel.from_pretrained(name).eval()
            _models[name] = (tok, model)
        return _models[name]


def embed(name, text):
    tok, model = load(name)
    enc = tok(text, return_tensors="pt", truncation=True, return_special_tokens_mask=True)
    special = enc.pop("special_tokens_mask")[0].bool().tolist()
    with torch.no_grad():
        hidden = model(**enc).last_hidden_state[0]
    tokens = tok.convert_ids_to_tokens(enc["input_ids"][0])
    return {"tokens": tokens, "vectors": hidden.tolist(), "special": special}


class Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        try:
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            payload = json.dumps(embed(body["model"], body["text"])).encode()
            self.send_response(200)
        except Exception as e:  # reported to the client as a bad response
            payload = json.dumps({"error": str(e)}).encode()
            self.send_response(500)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=8089)
    args = ap.parse_args()
    ThreadingHTTPServer((args.host, args.port), Handler).serve_forever()
