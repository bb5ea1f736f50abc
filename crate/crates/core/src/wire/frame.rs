use super::{parse_message, Message, WireError};

const MAX_FRAME: usize = 64 * 1024;

/// Splits a byte stream into blank-line-terminated messages.
#[derive(Debug, Default, Clone)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

/// A decoded frame together with its raw bytes.
#[derive(Debug, Clone)]
pub struct Frame {
    pub raw: Vec<u8>,
    pub message: Result<Message, WireError>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, data: &[u8]) -> Vec<Frame> {
        self.buf.extend_from_slice(data);
        let mut out = Vec::new();
        loop {
            let skip = self.buf.iter().take_while(|&&b| b == b'\n').count();
            self.buf.drain(..skip);
            match self.buf.windows(2).position(|w| w == b"\n\n") {
                Some(pos) => {
                    let raw: Vec<u8> = self.buf.drain(..pos + 2).collect();
                    let message = parse_message(&raw);
                    out.push(Frame { raw, message });
                }
                None => {
                    if self.buf.len() > MAX_FRAME {
                        let raw = std::mem::take(&mut self.buf);
                        out.push(Frame {
                            raw,
                            message: Err(WireError::syntax(0, "frame exceeds size limit")),
                        });
                    }
                    break;
                }
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &[u8] = b"type: execution_response\nmessage_id: 1\nstatus: 201\n\ntype: initiation_response\nmessage_id: 2\nstatus: 200\n\n";

    #[test]
    fn splits_concatenated_messages() {
        let mut d = FrameDecoder::new();
        let frames = d.push(TWO);
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1].message.as_ref().unwrap().message_id, 2);
        assert!(d.is_empty());
    }

    #[test]
    fn handles_arbitrary_chunking() {
        for split in 0..TWO.len() {
            let mut d = FrameDecoder::new();
            let mut frames = d.push(&TWO[..split]);
            frames.extend(d.push(&TWO[split..]));
            let ids: Vec<u64> = frames
                .iter()
                .map(|f| f.message.as_ref().unwrap().message_id)
                .collect();
            assert_eq!(ids, vec![1, 2], "split at {split}");
        }
    }

    #[test]
    fn bad_frame_does_not_poison_stream() {
        let mut d = FrameDecoder::new();
        let frames =
            d.push(b"garbage\n\ntype: initiation_response\nmessage_id: 2\nstatus: 200\n\n");
        assert_eq!(frames.len(), 2);
        assert!(frames[0].message.is_err());
        assert!(frames[1].message.is_ok());
    }
}
