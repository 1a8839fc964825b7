//! HTTP-template content obfuscation.
//!
//! Clients hide chunks in the URL path and a cookie of GET requests; servers
//! hide them in the body of HTML responses. Every emitted message is checked
//! against the direction's acceptance regex on decode, so the output format
//! is a contract rather than a convention. Hex encoding is the default: it
//! keeps message entropy well below that of random bytes.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use regex::bytes::Regex;

use crate::error::LayerError;
use crate::model::{LayerKind, Params};
use crate::transports::{Role, StreamLayer};

pub const URL_CAPACITY: usize = 256;
pub const COOKIE_CAPACITY: usize = 1024;
pub const REQUEST_CAPACITY: usize = URL_CAPACITY + COOKIE_CAPACITY;
pub const RESPONSE_CAPACITY: usize = 4096;

const USER_AGENT: &str = "Mozilla/5.0 (X11; Linux x86_64; rv:115.0) Gecko/20100101 Firefox/115.0";
const ACCEPT: &str = "text/html,application/xhtml+xml,application/xml;q=0.9,*/*;q=0.8";
const BODY_OPEN: &str = "<html><body><div id=\"c\">";
const BODY_CLOSE: &str = "</div></body></html>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Base16,
    Base64,
}

impl Encoding {
    fn encode(self, data: &[u8]) -> String {
        match self {
            Encoding::Base16 => hex::encode(data),
            Encoding::Base64 => URL_SAFE_NO_PAD.encode(data),
        }
    }

    fn decode(self, text: &[u8]) -> Option<Vec<u8>> {
        match self {
            Encoding::Base16 => hex::decode(text).ok(),
            Encoding::Base64 => URL_SAFE_NO_PAD.decode(text).ok(),
        }
    }

    fn class(self) -> &'static str {
        match self {
            Encoding::Base16 => "[0-9a-f]",
            Encoding::Base64 => "[A-Za-z0-9_-]",
        }
    }
}

/// Request/response templates with their acceptance regexes.
#[derive(Debug, Clone)]
pub struct FormatTemplate {
    pub encoding: Encoding,
    pub host: String,
    request_re: Regex,
    response_re: Regex,
}

impl FormatTemplate {
    pub fn new(encoding: Encoding, host: &str) -> Result<Self, String> {
        if host.is_empty() || !host.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '-') {
            return Err(format!("invalid host `{host}`"));
        }
        let c = encoding.class();
        let request = format!(
            "(?s-u)^GET /({c}*) HTTP/1\\.1\r\nHost: {host}\r\nUser-Agent: [^\r\n]+\r\nAccept: [^\r\n]+\r\n\
             Cookie: sid=({c}*)\r\nConnection: keep-alive\r\n\r\n$",
            host = regex::escape(host)
        );
        let response = format!(
            "(?s-u)^HTTP/1\\.1 200 OK\r\nServer: nginx\r\nContent-Type: text/html; charset=utf-8\r\n\
             Content-Length: [0-9]+\r\n\r\n{open}({c}*){close}$",
            open = regex::escape(BODY_OPEN),
            close = regex::escape(BODY_CLOSE)
        );
        Ok(FormatTemplate {
            encoding,
            host: host.to_string(),
            request_re: Regex::new(&request).map_err(|e| e.to_string())?,
            response_re: Regex::new(&response).map_err(|e| e.to_string())?,
        })
    }

    pub fn from_params(params: &Params) -> Result<Self, String> {
        let encoding = match params.get("encoding").unwrap_or("hex") {
            "hex" | "base16" => Encoding::Base16,
            "base64" => Encoding::Base64,
            other => return Err(format!("unknown encoding `{other}`")),
        };
        Self::new(encoding, params.get("host").unwrap_or("www.example.com"))
    }

    /// Acceptance regex for messages sent by `role`.
    pub fn acceptance_regex(&self, role: Role) -> &Regex {
        match role {
            Role::Client => &self.request_re,
            Role::Server => &self.response_re,
        }
    }

    pub fn capacity(role: Role) -> usize {
        match role {
            Role::Client => REQUEST_CAPACITY,
            Role::Server => RESPONSE_CAPACITY,
        }
    }
}

impl Default for FormatTemplate {
    fn default() -> Self {
        FormatTemplate::new(Encoding::Base16, "www.example.com").expect("default template is valid")
    }
}

/// Encodes one chunk as a message from `role`.
pub fn obf_encode(template: &FormatTemplate, role: Role, chunk: &[u8]) -> Result<Vec<u8>, LayerError> {
    if chunk.len() > FormatTemplate::capacity(role) {
        return Err(LayerError::transport(format!(
            "chunk of {} bytes exceeds slot capacity {}",
            chunk.len(),
            FormatTemplate::capacity(role)
        )));
    }
    let enc = template.encoding;
    let text = match role {
        Role::Client => {
            let split = chunk.len().min(URL_CAPACITY);
            format!(
                "GET /{} HTTP/1.1\r\nHost: {}\r\nUser-Agent: {USER_AGENT}\r\nAccept: {ACCEPT}\r\n\
                 Cookie: sid={}\r\nConnection: keep-alive\r\n\r\n",
                enc.encode(&chunk[..split]),
                template.host,
                enc.encode(&chunk[split..])
            )
        }
        Role::Server => {
            let body = format!("{BODY_OPEN}{}{BODY_CLOSE}", enc.encode(chunk));
            format!(
                "HTTP/1.1 200 OK\r\nServer: nginx\r\nContent-Type: text/html; charset=utf-8\r\n\
                 Content-Length: {}\r\n\r\n{body}",
                body.len()
            )
        }
    };
    Ok(text.into_bytes())
}

/// Decodes one complete message sent by `role`.
pub fn obf_decode(template: &FormatTemplate, role: Role, message: &[u8]) -> Result<Vec<u8>, LayerError> {
    let caps = template
        .acceptance_regex(role)
        .captures(message)
        .ok_or_else(|| LayerError::integrity("message does not match its template"))?;
    let mut out = Vec::new();
    for group in caps.iter().skip(1).flatten() {
        let part = template
            .encoding
            .decode(group.as_bytes())
            .ok_or_else(|| LayerError::integrity("malformed payload encoding"))?;
        out.extend_from_slice(&part);
    }
    Ok(out)
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Length of the first complete message from `role` at the front of `buf`.
fn message_len(role: Role, buf: &[u8]) -> Result<Option<usize>, LayerError> {
    let Some(head_end) = find(buf, b"\r\n\r\n").map(|i| i + 4) else {
        if buf.len() > 64 * 1024 {
            return Err(LayerError::integrity("unterminated message header"));
        }
        return Ok(None);
    };
    match role {
        Role::Client => Ok(Some(head_end)),
        Role::Server => {
            let head = &buf[..head_end];
            let key = b"Content-Length: ";
            let start = find(head, key)
                .map(|i| i + key.len())
                .ok_or_else(|| LayerError::integrity("response without Content-Length"))?;
            let digits: Vec<u8> = head[start..].iter().take_while(|b| b.is_ascii_digit()).copied().collect();
            let len: usize = std::str::from_utf8(&digits)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| LayerError::integrity("bad Content-Length"))?;
            Ok((buf.len() >= head_end + len).then_some(head_end + len))
        }
    }
}

/// Streaming OBF layer. Outbound messages are formatted for `role`;
/// inbound ones are parsed as the peer's.
pub struct HttpLayer {
    role: Role,
    template: FormatTemplate,
    buf: Vec<u8>,
}

impl HttpLayer {
    pub fn new(role: Role, template: FormatTemplate) -> Self {
        HttpLayer {
            role,
            template,
            buf: Vec::new(),
        }
    }

    fn peer(&self) -> Role {
        match self.role {
            Role::Client => Role::Server,
            Role::Server => Role::Client,
        }
    }
}

impl StreamLayer for HttpLayer {
    fn kind(&self) -> LayerKind {
        LayerKind::ContentObfuscation
    }

    fn encode(&mut self, data: &[u8], out: &mut Vec<u8>) -> Result<(), LayerError> {
        for chunk in data.chunks(FormatTemplate::capacity(self.role)) {
            out.extend_from_slice(&obf_encode(&self.template, self.role, chunk)?);
        }
        Ok(())
    }

    fn decode(&mut self, data: &[u8], out: &mut Vec<u8>) -> Result<(), LayerError> {
        self.buf.extend_from_slice(data);
        let peer = self.peer();
        let mut pos = 0;
        while let Some(len) = message_len(peer, &self.buf[pos..])? {
            let msg = &self.buf[pos..pos + len];
            out.extend_from_slice(&obf_decode(&self.template, peer, msg)?);
            pos += len;
        }
        self.buf.drain(..pos);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::shannon_entropy;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_chunk_is_a_minimal_valid_message() {
        let t = FormatTemplate::default();
        for role in [Role::Client, Role::Server] {
            let m = obf_encode(&t, role, &[]).unwrap();
            assert!(t.acceptance_regex(role).is_match(&m));
            assert!(obf_decode(&t, role, &m).unwrap().is_empty());
        }
    }

    #[test]
    fn random_512_bytes_match_and_stay_low_entropy() {
        let t = FormatTemplate::default();
        let mut chunk = vec![0u8; 512];
        ChaCha8Rng::seed_from_u64(1).fill_bytes(&mut chunk);
        for role in [Role::Client, Role::Server] {
            let m = obf_encode(&t, role, &chunk).unwrap();
            assert!(t.acceptance_regex(role).is_match(&m));
            assert!(shannon_entropy(&m) < 6.0);
            assert_eq!(obf_decode(&t, role, &m).unwrap(), chunk);
        }
    }

    #[test]
    fn oversize_chunk_is_refused() {
        let t = FormatTemplate::default();
        assert!(obf_encode(&t, Role::Client, &vec![0; REQUEST_CAPACITY + 1]).is_err());
    }

    #[test]
    fn base64_round_trips() {
        let t = FormatTemplate::new(Encoding::Base64, "cdn.example.net").unwrap();
        let data: Vec<u8> = (0..=255).collect();
        let m = obf_encode(&t, Role::Client, &data).unwrap();
        assert_eq!(obf_decode(&t, Role::Client, &m).unwrap(), data);
    }

    #[test]
    fn streaming_layer_survives_arbitrary_splits() {
        let mut data = vec![0u8; 10_000];
        ChaCha8Rng::seed_from_u64(2).fill_bytes(&mut data);
        for role in [Role::Client, Role::Server] {
            let mut tx = HttpLayer::new(role, FormatTemplate::default());
            let peer = if role == Role::Client { Role::Server } else { Role::Client };
            let mut rx = HttpLayer::new(peer, FormatTemplate::default());
            let mut wire = Vec::new();
            tx.encode(&data, &mut wire).unwrap();
            let mut out = Vec::new();
            for piece in wire.chunks(777) {
                rx.decode(piece, &mut out).unwrap();
            }
            assert_eq!(out, data);
        }
    }

    #[test]
    fn tampered_message_fails_integrity() {
        let t = FormatTemplate::default();
        let mut m = obf_encode(&t, Role::Client, b"abc").unwrap();
        m[5] = b'Z';
        assert!(obf_decode(&t, Role::Client, &m).is_err());
    }
}
