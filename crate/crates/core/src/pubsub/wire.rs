//! Push delivery wire format.
//!
//! ```text
//! {"message":{"messageId":"<id>","publishTime":"<RFC3339>",
//!  "attributes":{...},"data":"<base64>"},"subscription":"<name>"}
//! ```
//!
//! Serialized compactly with fields in exactly that order; attributes keep
//! their publish-time insertion order.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Message, MessageId};
use crate::clock::Timestamp;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("body is not a push envelope: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad messageId {0:?}")]
    MessageId(String),
    #[error("bad publishTime {0:?}")]
    PublishTime(String),
    #[error("data is not valid base64: {0}")]
    Data(#[from] base64::DecodeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushEnvelope {
    pub message: WireMessage,
    pub subscription: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WireMessage {
    pub message_id: String,
    pub publish_time: String,
    #[serde(default)]
    pub attributes: IndexMap<String, String>,
    #[serde(default)]
    pub data: String,
}

impl PushEnvelope {
    pub fn new(message: &Message, subscription: &str) -> Self {
        PushEnvelope {
            message: WireMessage {
                message_id: message.id.to_string(),
                publish_time: message.publish_time.to_rfc3339(),
                attributes: message.attributes.clone(),
                data: BASE64.encode(&message.data),
            },
            subscription: subscription.to_string(),
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("envelope serializes")
    }

    pub fn from_json(body: &[u8]) -> Result<Self, WireError> {
        Ok(serde_json::from_slice(body)?)
    }

    /// Rebuild the broker-side message carried by this envelope.
    pub fn to_message(&self) -> Result<Message, WireError> {
        let id = self
            .message
            .message_id
            .parse::<u64>()
            .map(MessageId)
            .map_err(|_| WireError::MessageId(self.message.message_id.clone()))?;
        let publish_time = Timestamp::parse_rfc3339(&self.message.publish_time)
            .ok_or_else(|| WireError::PublishTime(self.message.publish_time.clone()))?;
        Ok(Message {
            id,
            publish_time,
            attributes: self.message.attributes.clone(),
            data: BASE64.decode(&self.message.data)?,
        })
    }

    pub fn attribute(&self, name: &str) -> Option<&str> {
        self.message.attributes.get(name).map(String::as_str)
    }
}
