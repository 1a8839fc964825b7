//! Named stacks modelled on deployed circumvention systems.

pub const PRESETS: [(&str, &str); 6] = [
    ("plaintext", "trn:sim"),
    ("obfs3-like", "si:udh, enc:aead, trn:sim"),
    (
        "scramblesuit-like",
        "si:ticket, enc:aead, timlen:iid{lengths=200-1400,iat_ms=2-30,seed=11}, trn:sim",
    ),
    (
        "stegotorus-like",
        "si:ticket, enc:aead, mux:frame, obf:http, timlen:trace{model=http,pad=text}, trn:sim",
    ),
    ("gohop-like", "si:udh, enc:aead, trn:sim{hop=2000-2100,hop_seed=7,ignore_rst=true}"),
    ("decoy", "si:decoy, enc:aead, trn:sim"),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}
