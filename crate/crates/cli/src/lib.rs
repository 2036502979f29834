//! Session store, edit service, HTTP API and a stand-in backend server.

pub mod api;
pub mod mockserver;
pub mod service;
pub mod store;
